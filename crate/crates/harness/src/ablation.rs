//! The 2×2 component grid and the single-factor sweeps.

use std::fs;
use std::path::Path;

use avpyramid_core::evalkit::{EvalReport, RECALL_KS};
use avpyramid_core::params::load_checkpoint;
use avpyramid_core::pyramid::PyramidConfig;
use avpyramid_core::{rawio, Result};

use crate::config::{ExperimentConfig, Schedule};
use crate::data::{split_corpus, PairCache, Split};
use crate::eval::Evaluator;
use crate::train::{train, Outputs};

/// One cell of the component grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub msa: bool,
    pub msd: bool,
}

impl Cell {
    pub const GRID: [Cell; 4] = [
        Cell { msa: false, msd: false },
        Cell { msa: true, msd: false },
        Cell { msa: false, msd: true },
        Cell { msa: true, msd: true },
    ];

    pub fn name(self) -> &'static str {
        match (self.msa, self.msd) {
            (false, false) => "baseline",
            (true, false) => "msa",
            (false, true) => "msd",
            (true, true) => "msa+msd",
        }
    }

    /// The base config with components switched off as requested: no MSA
    /// means a single pyramid level without attention, no MSD means a zero
    /// diffusion weight. The contrastive objective is always trained.
    pub fn apply(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        if !self.msa {
            cfg.model.pyramid = PyramidConfig {
                spatial: base.model.pyramid.spatial,
                spatial_grids: base.model.pyramid.spatial_grids.clone(),
                ..PyramidConfig::single()
            };
            cfg.model.msa.use_attention = false;
        }
        if !self.msd {
            cfg.train.msd_weight = 0.0;
            cfg.train.schedule = Schedule::Joint;
        }
        cfg
    }
}

/// Outcome of one trained configuration.
#[derive(Clone, Debug)]
pub struct CellResult {
    pub label: String,
    pub fingerprint: String,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

pub fn table_header(key: &str) -> String {
    format!("{key},status,{}", EvalReport::csv_header())
}

pub fn table_row(label: &str, r: &CellResult) -> String {
    match (&r.report, &r.error) {
        (Some(rep), _) => format!("{label},ok,{}", rep.csv_row()),
        (None, e) => {
            let empty = EvalReport {
                config_fingerprint: r.fingerprint.clone(),
                ..EvalReport::default()
            };
            let msg = e.as_deref().unwrap_or("failed").replace([',', '\n'], ";");
            format!("{label},error: {msg},{}", empty.csv_row())
        }
    }
}

fn write_table(path: &Path, key: &str, rows: &[(String, CellResult)]) -> Result<()> {
    let mut text = String::new();
    for (_, r) in rows {
        text.push_str(&format!("# {}: config_fingerprint={}\n", r.label, r.fingerprint));
    }
    text.push_str(&table_header(key));
    text.push('\n');
    for (k, r) in rows {
        text.push_str(&table_row(k, r));
        text.push('\n');
    }
    rawio::write_atomic(path, text.as_bytes())
}

/// Train `cfg` on `cache` and evaluate it. Failures are captured, not
/// propagated.
pub fn run_cell(
    cfg: &ExperimentConfig,
    seed: u64,
    label: &str,
    cache: &PairCache,
    evaluator: &Evaluator,
    out: Option<&Path>,
) -> CellResult {
    let fingerprint = cfg.fingerprint(seed);
    let attempt = || -> Result<EvalReport> {
        let outputs = out.map(|d| Outputs { dir: d.to_path_buf() });
        let trained = train(cfg, seed, cache, outputs.as_ref())?;
        Ok(evaluator
            .report(&trained.params, cfg, &fingerprint, cfg.train.msd_weight > 0.0)?
            .0)
    };
    match attempt() {
        Ok(report) => CellResult {
            label: label.into(),
            fingerprint,
            report: Some(report),
            error: None,
        },
        Err(e) => CellResult {
            label: label.into(),
            fingerprint,
            report: None,
            error: Some(e.to_string()),
        },
    }
}

/// All four grid cells with a shared seed, training set and evaluator.
pub fn run_grid(
    base: &ExperimentConfig,
    seed: u64,
    cache: &PairCache,
    evaluator: &Evaluator,
    out: Option<&Path>,
) -> Vec<(Cell, CellResult)> {
    Cell::GRID
        .iter()
        .map(|&cell| {
            let cfg = cell.apply(base);
            let dir = out.map(|d| d.join("cells").join(cell.name().replace('+', "_")));
            (
                cell,
                run_cell(&cfg, seed, cell.name(), cache, evaluator, dir.as_deref()),
            )
        })
        .collect()
}

/// Grid plus the configured sweeps; writes one CSV per table under `out`.
pub fn run_ablation(base: &ExperimentConfig, seed: u64, out: &Path) -> Result<Vec<(String, CellResult)>> {
    base.validate()?;
    fs::create_dir_all(out)?;
    rawio::write_atomic(&out.join("config.toml"), base.to_toml_string().as_bytes())?;
    let corpus = split_corpus(&base.corpus, seed, Split::Train, base.data.train_size)?;
    let cache = PairCache::render(&corpus);
    let evaluator = Evaluator::new(base, seed)?;

    let grid = run_grid(base, seed, &cache, &evaluator, Some(out));
    let rows: Vec<(String, CellResult)> = grid.into_iter().map(|(c, r)| (c.name().to_string(), r)).collect();
    write_table(&out.join("grid.csv"), "cell", &rows)?;
    let mut all = rows;

    let full = Cell { msa: true, msd: true }.apply(base);
    if !base.ablation.sampling_steps.is_empty() {
        let checkpoint = out.join("cells").join("msa_msd").join("checkpoints").join("final");
        let rows = sampling_sweep(&full, seed, &evaluator, &base.ablation.sampling_steps, &checkpoint);
        write_table(&out.join("sweep_sampling_steps.csv"), "sample_steps", &rows)?;
        all.extend(rows);
    }
    let mut retrain = |name: &str, variants: Vec<(String, ExperimentConfig, Option<usize>)>| -> Result<()> {
        let mut rows = Vec::new();
        for (key, cfg, size) in variants {
            let label = format!("{name}={key}");
            let dir = out.join("sweeps").join(name).join(&key);
            let r = match size {
                Some(n) if n <= cache.len() => {
                    run_cell(&cfg, seed, &label, &cache.truncated(n), &evaluator, Some(&dir))
                }
                Some(n) => {
                    let larger = PairCache::render(&split_corpus(&cfg.corpus, seed, Split::Train, n)?);
                    run_cell(&cfg, seed, &label, &larger, &evaluator, Some(&dir))
                }
                None => run_cell(&cfg, seed, &label, &cache, &evaluator, Some(&dir)),
            };
            rows.push((key, r));
        }
        write_table(&out.join(format!("sweep_{name}.csv")), name, &rows)?;
        all.extend(rows);
        Ok(())
    };
    if !base.ablation.bidirectional_intervals.is_empty() {
        let variants = base
            .ablation
            .bidirectional_intervals
            .iter()
            .map(|&k| {
                let mut c = full.clone();
                c.train.bidirectional_interval = k;
                (k.to_string(), c, None)
            })
            .collect();
        retrain("bidirectional_interval", variants)?;
    }
    if base.ablation.spatial {
        let variants = [false, true]
            .iter()
            .map(|&s| {
                let mut c = full.clone();
                c.model.pyramid.spatial = s;
                (s.to_string(), c, None)
            })
            .collect();
        retrain("spatial", variants)?;
    }
    if !base.ablation.corpus_sizes.is_empty() {
        let variants = base
            .ablation
            .corpus_sizes
            .iter()
            .map(|&n| {
                let mut c = full.clone();
                c.data.train_size = n;
                (n.to_string(), c, Some(n))
            })
            .collect();
        retrain("corpus_size", variants)?;
    }
    Ok(all)
}

/// Evaluate generation from one stored checkpoint at each step count.
pub fn sampling_sweep(
    cfg: &ExperimentConfig,
    seed: u64,
    evaluator: &Evaluator,
    steps: &[usize],
    checkpoint: &Path,
) -> Vec<(String, CellResult)> {
    let fingerprint = cfg.fingerprint(seed);
    let params = load_checkpoint(checkpoint).map(|(p, _)| p);
    steps
        .iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.eval.sample_steps = s;
            let label = format!("sample_steps={s}");
            let result = params.as_ref().map_err(|e| e.to_string()).and_then(|p| {
                evaluator
                    .report(p, &c, &fingerprint, true)
                    .map(|r| r.0)
                    .map_err(|e| e.to_string())
            });
            let (report, error) = match result {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e)),
            };
            let r = CellResult {
                label,
                fingerprint: fingerprint.clone(),
                report,
                error,
            };
            (s.to_string(), r)
        })
        .collect()
}

/// V→A R@1 of a finished cell, if it produced a report.
pub fn v2a_r1(r: &CellResult) -> Option<f64> {
    r.report
        .as_ref()
        .and_then(|rep| rep.recall_v2a.get(&RECALL_KS[0]).copied())
}
