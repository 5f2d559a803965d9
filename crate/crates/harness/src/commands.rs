//! Corpus export and checkpoint-based evaluation commands.

use std::path::Path;

use avpyramid_core::evalkit::EvalReport;
use avpyramid_core::params::load_checkpoint;
use avpyramid_core::synthpair::{write_corpus, CorpusManifest};
use avpyramid_core::{Error, Result};

use crate::config::ExperimentConfig;
use crate::data::{split_corpus, Split};
use crate::eval::Evaluator;
use crate::train::write_report_csv;

/// Write every split to `out/<split>/` in the raw-array format.
pub fn run_gen_corpus(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<Vec<(Split, CorpusManifest)>> {
    cfg.validate()?;
    let d = &cfg.data;
    Split::ALL
        .iter()
        .map(|&split| {
            let len = match split {
                Split::Train => d.train_size,
                Split::Test => d.test_size,
                Split::Probe => d.probe_size,
                Split::Reference => d.reference_size,
            };
            let pairs = split_corpus(&cfg.corpus, seed, split, len)?.pairs();
            Ok((split, write_corpus(&out.join(split.name()), &cfg.corpus, &pairs)?))
        })
        .collect()
}

fn load_params(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<avpyramid_core::params::ParamStore> {
    let (params, _) = load_checkpoint(checkpoint)?;
    let expected = avpyramid_core::model::init_params(&cfg.model, &cfg.shapes(), 0);
    for (name, t) in expected.iter() {
        match params.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            Some(p) => {
                return Err(Error::Format(format!(
                    "checkpoint tensor {name} has shape {:?}, the config needs {:?}",
                    p.shape(),
                    t.shape()
                )))
            }
            None => return Err(Error::Format(format!("checkpoint lacks tensor {name}"))),
        }
    }
    Ok(params)
}

/// Generate audio for the test videos from a checkpoint and score it.
pub fn run_generate(cfg: &ExperimentConfig, seed: u64, checkpoint: &Path, out: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let params = load_params(cfg, checkpoint)?;
    let evaluator = Evaluator::new(cfg, seed)?;
    let fingerprint = cfg.fingerprint(seed);
    let emb = evaluator.embed_test(&params, cfg)?;
    let count = cfg.eval.generation_samples.max(2).min(evaluator.data.test.len());
    let gen = evaluator.generate(&params, cfg, &emb, count, cfg.eval.steps(&cfg.model))?;
    gen.write(&out.join("generated"), &fingerprint)?;
    let probe = evaluator.train_probe(&params, cfg)?;
    let m = evaluator.generation_metrics(&params, cfg, &probe, &gen)?;
    let report = EvalReport {
        config_fingerprint: fingerprint.clone(),
        generation_samples: count,
        kld: Some(m.kld),
        fad: Some(m.fad),
        align_acc: Some(m.align_acc),
        ..EvalReport::default()
    };
    write_report_csv(
        &out.join("generation_report.csv"),
        &fingerprint,
        std::slice::from_ref(&report),
    )?;
    Ok(report)
}

/// Retrieval recall in both directions on the test split.
pub fn run_retrieval_eval(cfg: &ExperimentConfig, seed: u64, checkpoint: &Path, out: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let params = load_params(cfg, checkpoint)?;
    let evaluator = Evaluator::new(cfg, seed)?;
    let fingerprint = cfg.fingerprint(seed);
    let (report, _) = evaluator.report(&params, cfg, &fingerprint, false)?;
    std::fs::create_dir_all(out)?;
    write_report_csv(
        &out.join("retrieval_report.csv"),
        &fingerprint,
        std::slice::from_ref(&report),
    )?;
    Ok(report)
}
