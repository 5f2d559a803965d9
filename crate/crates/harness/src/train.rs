//! The pretraining loop.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use avpyramid_core::autograd::Graph;
use avpyramid_core::evalkit::EvalReport;
use avpyramid_core::model::{self, LossWeights};
use avpyramid_core::optim::Adam;
use avpyramid_core::params::{load_checkpoint, save_checkpoint, ParamStore};
use avpyramid_core::rawio;
use avpyramid_core::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Schedule};
use crate::data::{derive_seed, split_corpus, PairCache, Split};
use crate::eval::Evaluator;

const STREAM_TRAIN: u64 = 5;

/// Mean losses of one epoch. Absent objectives are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub steps: usize,
    pub total: f64,
    pub msa: Option<f64>,
    pub msa_per_scale: Vec<f64>,
    pub msd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_fingerprint: String,
    pub seed: u64,
    /// Unix seconds.
    pub started_at: u64,
    pub finished_at: u64,
    pub epochs: Vec<EpochLosses>,
    pub report: EvalReport,
    pub checkpoints: Vec<String>,
    pub step_log: Option<String>,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        rawio::write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }
}

/// `path` relative to `root`, with `/` separators, so manifests do not
/// depend on where the run directory lives.
fn relative(path: &Path, root: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Objective weights in effect during `epoch` (0-based).
pub fn weights_for_epoch(cfg: &ExperimentConfig, epoch: usize) -> LossWeights {
    let t = &cfg.train;
    match t.schedule {
        Schedule::Joint => LossWeights {
            msa: t.msa_weight,
            msd: t.msd_weight,
        },
        Schedule::Staged if epoch < t.epochs.div_ceil(2) => LossWeights {
            msa: t.msa_weight,
            msd: 0.0,
        },
        Schedule::Staged => LossWeights {
            msa: 0.0,
            msd: t.msd_weight,
        },
    }
}

/// Header of the per-step CSV log for a model with `levels` pyramid levels.
pub fn step_log_header(levels: usize) -> Vec<String> {
    let mut h: Vec<String> = ["epoch", "step", "total", "msa"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((1..=levels).map(|l| format!("msa_l{l}")));
    h.extend(["msd_term1".to_string(), "msd_term2".to_string()]);
    h
}

/// Where a training run writes its artifacts. `None` keeps everything in
/// memory.
pub struct Outputs {
    pub dir: PathBuf,
}

impl Outputs {
    fn checkpoint_dir(&self, name: &str) -> PathBuf {
        self.dir.join("checkpoints").join(name)
    }
}

/// Result of [`train`]: the final parameters as stored (rounded to `f32`).
pub struct Trained {
    pub params: ParamStore,
    pub epochs: Vec<EpochLosses>,
    pub checkpoints: Vec<String>,
    pub step_log: Option<String>,
}

#[derive(Serialize)]
struct FailureDump<'a> {
    reason: &'a str,
    seed: u64,
    epoch: usize,
    step: usize,
    batch_index: usize,
    sample_indices: &'a [usize],
    sample_seeds: Vec<u64>,
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

/// Train from the initial parameters for `cfg.train.epochs` epochs on
/// `cache`, checkpointing every epoch when `out` is given.
pub fn train(cfg: &ExperimentConfig, seed: u64, cache: &PairCache, out: Option<&Outputs>) -> Result<Trained> {
    cfg.validate()?;
    let fingerprint = cfg.fingerprint(seed);
    let shapes = cfg.shapes();
    let schedule = cfg.model.msd.schedule()?;
    let levels = cfg.model.levels();
    let mut params = model::init_params(&cfg.model, &cfg.shapes(), seed);
    let mut adam = Adam::new(cfg.train.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_TRAIN));
    let train_corpus = split_corpus(&cfg.corpus, seed, Split::Train, cache.len())?;

    let mut log = match out {
        Some(o) => {
            fs::create_dir_all(&o.dir)?;
            let path = o.dir.join("train_log.csv");
            let mut file = fs::File::create(&path)?;
            writeln!(file, "# config_fingerprint={fingerprint}")?;
            let mut w = csv::Writer::from_writer(file);
            w.write_record(step_log_header(levels)).map_err(csv_err)?;
            Some((w, path))
        }
        None => None,
    };

    let mut epochs = Vec::with_capacity(cfg.train.epochs);
    let mut checkpoints = Vec::new();
    let save = |params: &ParamStore, epoch: usize, checkpoints: &mut Vec<String>| -> Result<()> {
        let Some(o) = out else { return Ok(()) };
        let meta: BTreeMap<String, String> = [
            ("config_fingerprint".to_string(), fingerprint.clone()),
            ("epoch".to_string(), epoch.to_string()),
        ]
        .into();
        let dir = o.checkpoint_dir(&format!("epoch-{epoch:03}"));
        save_checkpoint(&dir, params, seed, meta)?;
        checkpoints.push(relative(&dir, &o.dir));
        Ok(())
    };
    if cfg.train.epochs == 0 {
        save(&params, 0, &mut checkpoints)?;
    }

    let b = cfg.train.batch_size;
    let mut order: Vec<usize> = (0..cache.len()).collect();
    let mut global_step = 0usize;
    for epoch in 0..cfg.train.epochs {
        let weights = weights_for_epoch(cfg, epoch);
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, vec![0.0; levels], 0.0, 0usize);
        for (batch_index, idx) in order.chunks(b).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let batch = cache.batch(idx);
            let draw = model::draw_for(&cfg.model, &shapes, idx.len(), &mut rng);
            let k = cfg.train.bidirectional_interval;
            let terminal = k > 0 && global_step.is_multiple_of(k);
            let mut g = Graph::new();
            let p = params.bind(&mut g, true);
            let fail = |reason: &str| -> Result<Error> {
                let dump = FailureDump {
                    reason,
                    seed,
                    epoch,
                    step: global_step,
                    batch_index,
                    sample_indices: idx,
                    sample_seeds: idx.iter().map(|&i| train_corpus.sample_seed(i)).collect(),
                };
                let text = serde_json::to_string_pretty(&dump)?;
                if let Some(o) = out {
                    rawio::write_atomic(&o.dir.join("failure.json"), text.as_bytes())?;
                }
                Ok(Error::Numeric(format!(
                    "{reason} at epoch {epoch}, batch {batch_index}: {text}"
                )))
            };
            let loss = match model::training_loss(
                &mut g, &p, &cfg.model, &shapes, &schedule, &batch, weights, &draw, terminal,
            ) {
                Ok(l) => l,
                Err(Error::Numeric(m)) => return Err(fail(&m)?),
                Err(e) => return Err(e),
            };
            let total = g.value(loss.total).item();
            let grads = model::gradients(&g, &p, loss.total);
            if !total.is_finite() {
                return Err(fail("non-finite loss")?);
            }
            if grads.values().any(|t| !t.is_finite()) {
                return Err(fail("non-finite gradient")?);
            }
            adam.step(&mut params, &grads);

            let value = |v: Option<avpyramid_core::autograd::Var>| v.map(|v| g.value(v).item());
            let msa = value(loss.msa_total);
            let per: Vec<f64> = loss.msa_per_scale.iter().map(|&v| g.value(v).item()).collect();
            let (t1, t2) = (value(loss.msd_term1), value(loss.msd_term2));
            sums.0 += total;
            sums.1 += msa.unwrap_or(0.0);
            for (s, v) in sums.2.iter_mut().zip(&per) {
                *s += v;
            }
            sums.3 += t1.unwrap_or(0.0) + cfg.model.msd.lambda_terminal * t2.unwrap_or(0.0);
            sums.4 += 1;
            if let Some((w, _)) = log.as_mut() {
                let mut row = vec![
                    epoch.to_string(),
                    global_step.to_string(),
                    format!("{total:e}"),
                    fmt(msa),
                ];
                row.extend((0..levels).map(|l| fmt(per.get(l).copied())));
                row.extend([fmt(t1), fmt(t2)]);
                w.write_record(&row).map_err(csv_err)?;
            }
            global_step += 1;
        }
        let n = sums.4.max(1) as f64;
        epochs.push(EpochLosses {
            epoch,
            steps: sums.4,
            total: sums.0 / n,
            msa: (weights.msa > 0.0).then_some(sums.1 / n),
            msa_per_scale: if weights.msa > 0.0 {
                sums.2.iter().map(|s| s / n).collect()
            } else {
                Vec::new()
            },
            msd: (weights.msd > 0.0).then_some(sums.3 / n),
        });
        if let Some((w, _)) = log.as_mut() {
            w.flush()?;
        }
        save(&params, epoch + 1, &mut checkpoints)?;
    }
    let step_log = log.map(|(mut w, path)| -> Result<String> {
        w.flush()?;
        Ok(relative(&path, &out.expect("log implies outputs").dir))
    });
    let step_log = step_log.transpose()?;

    // Evaluate what was stored: reload from disk, or round the same way.
    let params = match (checkpoints.last(), out) {
        (Some(dir), Some(o)) => load_checkpoint(&o.dir.join(dir))?.0,
        _ => {
            params.round_to_f32();
            params
        }
    };
    if let Some(o) = out {
        let final_dir = o.checkpoint_dir("final");
        let meta: BTreeMap<String, String> = [
            ("config_fingerprint".to_string(), fingerprint.clone()),
            ("epoch".to_string(), cfg.train.epochs.to_string()),
        ]
        .into();
        save_checkpoint(&final_dir, &params, seed, meta)?;
    }
    Ok(Trained {
        params,
        epochs,
        checkpoints,
        step_log,
    })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Train, evaluate and write `manifest.json` plus `report.csv` to `out`.
pub fn run_pretrain(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    let started_at = unix_now();
    let corpus = split_corpus(&cfg.corpus, seed, Split::Train, cfg.data.train_size)?;
    let cache = PairCache::render(&corpus);
    let evaluator = Evaluator::new(cfg, seed)?;
    run_pretrain_with(cfg, seed, out, &cache, &evaluator, started_at)
}

/// [`run_pretrain`] with a pre-rendered training set and evaluator.
pub fn run_pretrain_with(
    cfg: &ExperimentConfig,
    seed: u64,
    out: &Path,
    cache: &PairCache,
    evaluator: &Evaluator,
    started_at: u64,
) -> Result<RunManifest> {
    let outputs = Outputs { dir: out.to_path_buf() };
    fs::create_dir_all(out)?;
    rawio::write_atomic(&out.join("config.toml"), cfg.to_toml_string().as_bytes())?;
    let trained = train(cfg, seed, cache, Some(&outputs))?;
    let fingerprint = cfg.fingerprint(seed);
    let (report, generated) = evaluator.report(&trained.params, cfg, &fingerprint, cfg.train.msd_weight > 0.0)?;
    if let Some(gen) = generated {
        gen.write(&out.join("generated"), &fingerprint)?;
    }
    write_report_csv(&out.join("report.csv"), &fingerprint, std::slice::from_ref(&report))?;
    let manifest = RunManifest {
        config_fingerprint: fingerprint,
        seed,
        started_at,
        finished_at: unix_now(),
        epochs: trained.epochs,
        report,
        checkpoints: trained.checkpoints,
        step_log: trained.step_log,
    };
    manifest.write(&out.join("manifest.json"))?;
    Ok(manifest)
}

/// One [`EvalReport`] row per entry, preceded by a fingerprint comment line.
pub fn write_report_csv(path: &Path, fingerprint: &str, reports: &[EvalReport]) -> Result<()> {
    let mut text = format!("# config_fingerprint={fingerprint}\n{}\n", EvalReport::csv_header());
    for r in reports {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    rawio::write_atomic(path, text.as_bytes())
}
