//! Subcommand bodies. Each returns its report; the caller maps errors to
//! exit codes.

use std::fs;
use std::path::{Path, PathBuf};

use adamct::check::{check_model_gradients, model_check_options, move_to_generic_point, ModelGradReport};
use adamct::checkpoint::{compare_architecture, load_checkpoint, save_checkpoint};
use adamct::data::{
    build_sequences, generate_synthetic, ingest_file, pad_truncate, split_leave_one_out, Dataset, DatasetStats,
    Splits,
};
use adamct::evaluate::{evaluate_split, MetricsReport};
use adamct::model::{init_model, Model, ModelConfig};
use adamct::tensor::OpKind;
use adamct::train::{fit, TrainHistory};
use adamct::{Error, Result, RngState};
use rand::Rng;
use serde::Serialize;

use crate::ablation::{grid_cells, AblationReport, AblationRow, GridKind, SeedResult};
use crate::config::RunConfig;

/// 0 success, 1 verification or training failure, 2 configuration error,
/// 3 data error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Checkpoint(_) => 2,
        Error::Data(_) => 3,
        _ => 1,
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, serde_json::to_string_pretty(value).expect("report serializes") + "\n")
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match (&cfg.data.path, &cfg.data.synthetic) {
        (Some(path), _) => {
            let rows = ingest_file(path, &cfg.data.ingest_options()).map_err(|e| match e {
                Error::Io { path, source } => Error::Data(format!("cannot read {}: {source}", path.display())),
                other => other,
            })?;
            if !rows.malformed_lines.is_empty() {
                log::warn!("skipped {} malformed rows", rows.malformed_lines.len());
            }
            build_sequences(&rows.interactions)
        }
        (None, Some(spec)) => generate_synthetic(spec, &mut RngState::new(cfg.data.seed)),
        (None, None) => Err(Error::Config("no data source configured".into())),
    }
}

/// The model section with the catalog size filled in from the data.
pub fn resolve_model(cfg: &RunConfig, dataset: &Dataset) -> Result<ModelConfig> {
    let items = dataset.num_items();
    match cfg.model.num_items {
        0 => Ok(ModelConfig {
            num_items: items,
            ..cfg.model.clone()
        }),
        n if n == items => Ok(cfg.model.clone()),
        n => Err(Error::Config(format!(
            "model.num_items is {n} but the data has {items} items"
        ))),
    }
}

pub struct TrainRun {
    pub model: Model<f32>,
    pub history: TrainHistory,
    pub test: MetricsReport,
}

/// Trains on `dataset` and evaluates the best weights on the test split,
/// writing every artifact into `out` when given.
pub fn train_pipeline(cfg: &RunConfig, dataset: &Dataset, splits: &Splits, out: Option<&Path>) -> Result<TrainRun> {
    let model_cfg = resolve_model(cfg, dataset)?;
    let resolved = RunConfig {
        model: model_cfg.clone(),
        ..cfg.clone()
    };
    if let Some(dir) = out {
        write(&dir.join("config.toml"), resolved.to_toml())?;
    }
    let model: Model<f32> = init_model(&model_cfg, &mut RngState::new(cfg.train.seed))?;
    let fitted = fit(model, dataset, splits, &cfg.train, &cfg.eval)?;
    let test = evaluate_split(&fitted.model, "test", &splits.test, dataset, &cfg.eval)?;
    if let Some(dir) = out {
        save_checkpoint(&fitted.model, &dir.join("checkpoint.bin"))?;
        write_json(&dir.join("history.json"), &fitted.history)?;
        write(&dir.join("history.csv"), fitted.history.to_csv())?;
        write(&dir.join("coefficients.csv"), fitted.history.coefficients_csv())?;
        write_json(&dir.join("metrics_test.json"), &test)?;
        write(&dir.join("metrics_test.csv"), test.to_csv())?;
    }
    Ok(TrainRun {
        model: fitted.model,
        history: fitted.history,
        test,
    })
}

fn splits_for(cfg: &RunConfig, dataset: &Dataset) -> Splits {
    split_leave_one_out(dataset, cfg.train.sliding_window)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainRun> {
    let dataset = load_dataset(cfg)?;
    let splits = splits_for(cfg, &dataset);
    write_json(&cfg.output_dir.join("stats.json"), &dataset.stats())?;
    let run = train_pipeline(cfg, &dataset, &splits, Some(&cfg.output_dir))?;
    println!("{}", run.test.to_csv().trim_end());
    Ok(run)
}

pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path, split: &str) -> Result<MetricsReport> {
    let dataset = load_dataset(cfg)?;
    let requested = resolve_model(cfg, &dataset)?;
    let model = load_checkpoint(checkpoint)?;
    compare_architecture(&model.config, &requested)?;
    let splits = splits_for(cfg, &dataset);
    let examples = match split {
        "test" => &splits.test,
        "valid" => &splits.valid,
        other => return Err(Error::Config(format!("unknown split `{other}` (expected test or valid)"))),
    };
    let report = evaluate_split(&model, split, examples, &dataset, &cfg.eval)?;
    write_json(&cfg.output_dir.join(format!("metrics_{split}.json")), &report)?;
    write(&cfg.output_dir.join(format!("metrics_{split}.csv")), report.to_csv())?;
    println!("{}", report.to_csv().trim_end());
    Ok(report)
}

/// Random left-padded sequences whose lengths spread from `N` down to 1.
pub fn gradcheck_batch(model: &ModelConfig, size: usize, rng: &mut RngState) -> Vec<(Vec<usize>, usize)> {
    let n = model.max_len;
    (0..size)
        .map(|i| {
            let len = if size == 1 { n } else { n - i * (n - 1) / (size - 1) };
            let prefix: Vec<usize> = (0..len).map(|_| rng.random_range(1..=model.num_items)).collect();
            let (items, _) = pad_truncate(&prefix, n).expect("nonempty prefix");
            (items, rng.random_range(1..=model.num_items))
        })
        .collect()
}

/// Whole-model gradient check in 64-bit with dropout disabled.
pub fn cmd_gradcheck(cfg: &RunConfig, fault: Option<OpKind>) -> Result<ModelGradReport> {
    let gc = &cfg.gradcheck;
    let model_cfg = match (cfg.model.num_items, &cfg.data.synthetic) {
        (0, Some(s)) => ModelConfig {
            num_items: s.num_items,
            ..cfg.model.clone()
        },
        (0, None) => return Err(Error::Config("gradcheck needs model.num_items or [data.synthetic]".into())),
        _ => cfg.model.clone(),
    };
    let mut rng = RngState::new(gc.seed);
    let mut model: Model<f64> = init_model(&model_cfg, &mut rng)?;
    let batch = gradcheck_batch(&model_cfg, gc.batch_size, &mut rng);
    move_to_generic_point(&mut model, &batch, &mut rng, gc.noise_scale, gc.relu_margin)?;
    let mut opts = model_check_options(gc.seed);
    opts.max_coords = Some(gc.max_coords);
    opts.fault = fault;
    let report = check_model_gradients(&model, &batch, &opts, gc.tolerance)?;
    println!("{:<48} {:>16} {:>14} {:>8}", "tensor", "group", "max_rel_err", "coords");
    for t in &report.tensors {
        println!(
            "{:<48} {:>16} {:>14.3e} {:>8}",
            t.name, t.group, t.max_relative_error, t.coords_checked
        );
    }
    println!();
    for g in &report.groups {
        let status = if g.max_relative_error < gc.tolerance { "ok" } else { "FAIL" };
        println!("{:<16} {:>14.3e} {status}", g.group, g.max_relative_error);
    }
    write_json(&cfg.output_dir.join("gradcheck.json"), &report)?;
    Ok(report)
}

pub fn cmd_ablate(cfg: &RunConfig, grid: GridKind, seeds: &[u64]) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablate needs at least one seed".into()));
    }
    let dataset = load_dataset(cfg)?;
    let splits = splits_for(cfg, &dataset);
    let base = resolve_model(cfg, &dataset)?;
    let dir = cfg.output_dir.join(format!("ablate_{grid}"));
    let mut rows = Vec::new();
    for cell in grid_cells(grid, &base) {
        let results = seeds
            .iter()
            .map(|&seed| {
                let mut run_cfg = cfg.clone();
                run_cfg.model = cell.model.clone();
                run_cfg.train.seed = seed;
                let out: PathBuf = dir.join(&cell.name).join(format!("seed{seed}"));
                match train_pipeline(&run_cfg, &dataset, &splits, Some(&out)) {
                    Ok(run) => SeedResult {
                        seed,
                        ndcg10: run.test.ndcg_at(10),
                        recall10: run.test.recall_at(10),
                        error: None,
                    },
                    Err(e) => {
                        log::error!("cell {} seed {seed} failed: {e}", cell.name);
                        SeedResult {
                            seed,
                            ndcg10: None,
                            recall10: None,
                            error: Some(e.to_string()),
                        }
                    }
                }
            })
            .collect();
        let row = AblationRow::new(&cell, results);
        log::info!("{} done: mean ndcg@10 {:?}", row.cell, row.mean_ndcg10);
        rows.push(row);
    }
    let report = AblationReport {
        grid,
        seeds: seeds.to_vec(),
        rows,
    };
    write_json(&dir.join("report.json"), &report)?;
    write(&dir.join("report.csv"), report.to_csv())?;
    print!("{}", report.to_csv());
    Ok(report)
}

pub fn cmd_stats(cfg: &RunConfig) -> Result<DatasetStats> {
    let stats = load_dataset(cfg)?.stats();
    write_json(&cfg.output_dir.join("stats.json"), &stats)?;
    write(
        &cfg.output_dir.join("stats.csv"),
        format!("{}\n{}\n", DatasetStats::CSV_HEADER, stats.csv_row()),
    )?;
    println!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize"));
    Ok(stats)
}
