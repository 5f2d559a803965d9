//! Evaluation of a parameter set: retrieval, generation metrics and the
//! conditioning check.

use std::collections::BTreeMap;
use std::path::Path;

use avpyramid_core::encoders::{FeatureSequence, Modality};
use avpyramid_core::evalkit::{
    alignment_accuracy, alignment_features, fit_gaussian, frechet_distance, kld_metric, recall_from_scores,
    AlignmentProbe, AudioClassifier, EvalReport, RECALL_KS,
};
use avpyramid_core::model::{self, Embeddings};
use avpyramid_core::msa;
use avpyramid_core::params::ParamStore;
use avpyramid_core::rawio;
use avpyramid_core::synthpair::{band_energy, roll_audio, RawPair};
use avpyramid_core::{Error, Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, RetrievalScoring};
use crate::data::{derive_seed, EvalData};

const STREAM_CLASSIFIER: u64 = 6;
const STREAM_GENERATION: u64 = 7;

/// Model-independent evaluation state: rendered splits and the evaluator
/// classifier. Shared by every run with the same corpus, splits and seed.
pub struct Evaluator {
    pub data: EvalData,
    pub classifier: AudioClassifier,
    pub seed: u64,
}

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    Tensor::from_fn(&[c, r], |i| t.data()[(i % r) * c + i / r])
}

fn finest(levels: &[Tensor], i: usize, modality: Modality) -> Result<FeatureSequence> {
    FeatureSequence::new(levels[0].index0(i), modality, 1)
}

/// Generated spectrograms together with the seeds and test indices that
/// produced them.
#[derive(Clone, Debug)]
pub struct Generated {
    pub spectrograms: Vec<Tensor>,
    pub seeds: Vec<u64>,
    pub indices: Vec<usize>,
    pub sample_steps: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratedManifest {
    pub format: String,
    pub count: usize,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
    pub seeds: Vec<u64>,
    pub test_indices: Vec<usize>,
    pub sample_steps: usize,
    pub config_fingerprint: String,
}

impl Generated {
    pub fn write(&self, dir: &Path, fingerprint: &str) -> Result<GeneratedManifest> {
        std::fs::create_dir_all(dir)?;
        let data: Vec<f64> = self
            .spectrograms
            .iter()
            .flat_map(|s| s.data().iter().copied())
            .collect();
        let manifest = GeneratedManifest {
            format: "avpyramid-generated-v1".into(),
            count: self.spectrograms.len(),
            shape: self
                .spectrograms
                .first()
                .map(|s| s.shape().to_vec())
                .unwrap_or_default(),
            dtype: "f32le".into(),
            file: "spectrograms.f32".into(),
            seeds: self.seeds.clone(),
            test_indices: self.indices.clone(),
            sample_steps: self.sample_steps,
            config_fingerprint: fingerprint.into(),
        };
        rawio::write_f32_file(&dir.join(&manifest.file), &data)?;
        rawio::write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }
}

/// Generation metrics of one sampler setting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationMetrics {
    pub kld: f64,
    pub fad: f64,
    pub align_acc: f64,
}

/// Paired band-energy errors with matched and shuffled conditioning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub matched_mse: Vec<f64>,
    pub shuffled_mse: Vec<f64>,
}

impl Conditioning {
    /// Percentage of samples where the matched video gives the lower error.
    pub fn win_rate(&self) -> f64 {
        let wins = self
            .matched_mse
            .iter()
            .zip(&self.shuffled_mse)
            .filter(|(m, s)| m < s)
            .count();
        100.0 * wins as f64 / self.matched_mse.len().max(1) as f64
    }
}

impl Evaluator {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let d = &cfg.data;
        let data = EvalData::render(&cfg.corpus, seed, d.test_size, d.probe_size, d.reference_size)?;
        let specs: Vec<Tensor> = data.reference.iter().map(|p| p.audio.clone()).collect();
        let labels: Vec<usize> = data.reference.iter().map(|p| p.truth.class_id).collect();
        let classifier = AudioClassifier::train(
            &specs,
            &labels,
            cfg.corpus.classes,
            &cfg.eval.classifier,
            derive_seed(seed, STREAM_CLASSIFIER),
        )?;
        Ok(Self { data, classifier, seed })
    }

    pub fn embed_test(&self, params: &ParamStore, cfg: &ExperimentConfig) -> Result<Embeddings> {
        model::embed_pairs(params, &cfg.model, &cfg.shapes(), &self.data.test, cfg.eval.chunk)
    }

    /// `(V→A, A→V)` recall at [`RECALL_KS`] over the test split.
    pub fn retrieval(
        &self,
        cfg: &ExperimentConfig,
        emb: &Embeddings,
    ) -> Result<(BTreeMap<usize, f64>, BTreeMap<usize, f64>)> {
        let levels = match cfg.eval.retrieval_scoring {
            RetrievalScoring::Finest => 1,
            RetrievalScoring::MeanLevels => emb.audio.len(),
        };
        let n = emb.audio[0].shape()[0];
        let chunk = cfg.eval.chunk;
        let mut rows = Vec::with_capacity(n * n);
        for start in (0..n).step_by(chunk) {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let a = model::select_levels(&emb.audio[..levels], &idx);
            let s = msa::similarity_scores(&a, &emb.video[..levels], &cfg.model.msa)?;
            rows.extend_from_slice(s.data());
        }
        let a2v_scores = Tensor::new(vec![n, n], rows);
        let matches: Vec<usize> = (0..n).collect();
        let a2v = recall_from_scores(&a2v_scores, &matches, &RECALL_KS)?;
        let v2a = recall_from_scores(&transpose(&a2v_scores), &matches, &RECALL_KS)?;
        Ok((v2a, a2v))
    }

    /// Sample one spectrogram for each of the first `count` test videos.
    pub fn generate(
        &self,
        params: &ParamStore,
        cfg: &ExperimentConfig,
        emb: &Embeddings,
        count: usize,
        steps: usize,
    ) -> Result<Generated> {
        let indices: Vec<usize> = (0..count).collect();
        let cond = model::select_levels(&emb.video, &indices);
        let base = derive_seed(self.seed, STREAM_GENERATION);
        let seeds: Vec<u64> = indices.iter().map(|&i| base ^ i as u64).collect();
        let spectrograms = model::generate(
            params,
            &cfg.model,
            &cfg.shapes(),
            Some(&cond),
            &seeds,
            cfg.eval.sampler,
            steps,
            cfg.eval.chunk,
        )?;
        if spectrograms.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("generated spectrogram holds non-finite values".into()));
        }
        Ok(Generated {
            spectrograms,
            seeds,
            indices,
            sample_steps: steps,
        })
    }

    fn probe_features(
        &self,
        params: &ParamStore,
        cfg: &ExperimentConfig,
        pairs: &[RawPair],
        audio: &[Tensor],
    ) -> Result<Vec<Vec<f64>>> {
        let shapes = cfg.shapes();
        let videos: Vec<&Tensor> = pairs.iter().map(|p| &p.video).collect();
        let audios: Vec<&Tensor> = audio.iter().collect();
        let v = model::embed_videos(params, &cfg.model, &shapes, &videos, cfg.eval.chunk)?;
        let a = model::embed_audios(params, &cfg.model, &shapes, &audios, cfg.eval.chunk)?;
        (0..pairs.len())
            .map(|i| alignment_features(&finest(&v, i, Modality::Video)?, &finest(&a, i, Modality::Audio)?))
            .collect()
    }

    /// Aligned/shifted pairs: real audio first, then the rolled copies.
    fn aligned_and_shifted(
        &self,
        params: &ParamStore,
        cfg: &ExperimentConfig,
        pairs: &[RawPair],
        audio: &[Tensor],
    ) -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
        let shifted: Vec<Tensor> = audio.iter().map(|a| roll_audio(a, cfg.eval.negative_shift)).collect();
        let mut all_pairs = pairs.to_vec();
        all_pairs.extend_from_slice(pairs);
        let mut all_audio = audio.to_vec();
        all_audio.extend(shifted);
        let features = self.probe_features(params, cfg, &all_pairs, &all_audio)?;
        let labels = (0..2 * pairs.len()).map(|i| i < pairs.len()).collect();
        Ok((features, labels))
    }

    /// Train the alignment probe on real probe-split pairs.
    pub fn train_probe(&self, params: &ParamStore, cfg: &ExperimentConfig) -> Result<AlignmentProbe> {
        let audio: Vec<Tensor> = self.data.probe.iter().map(|p| p.audio.clone()).collect();
        let (features, labels) = self.aligned_and_shifted(params, cfg, &self.data.probe, &audio)?;
        AlignmentProbe::train(&features, &labels, &cfg.eval.probe)
    }

    pub fn generation_metrics(
        &self,
        params: &ParamStore,
        cfg: &ExperimentConfig,
        probe: &AlignmentProbe,
        gen: &Generated,
    ) -> Result<GenerationMetrics> {
        let real: Vec<Tensor> = gen.indices.iter().map(|&i| self.data.test[i].audio.clone()).collect();
        let kld = kld_metric(
            &self.classifier.probabilities(&gen.spectrograms),
            &self.classifier.probabilities(&real),
        )?;
        let fad = frechet_distance(
            &fit_gaussian(&self.classifier.features(&gen.spectrograms))?,
            &fit_gaussian(&self.classifier.features(&real))?,
        )?;
        let pairs: Vec<RawPair> = gen.indices.iter().map(|&i| self.data.test[i].clone()).collect();
        let (features, labels) = self.aligned_and_shifted(params, cfg, &pairs, &gen.spectrograms)?;
        let align_acc = alignment_accuracy(probe, &features, &labels)?;
        Ok(GenerationMetrics { kld, fad, align_acc })
    }

    /// Full report: retrieval always, generation metrics when `generation`.
    pub fn report(
        &self,
        params: &ParamStore,
        cfg: &ExperimentConfig,
        fingerprint: &str,
        generation: bool,
    ) -> Result<(EvalReport, Option<Generated>)> {
        let emb = self.embed_test(params, cfg)?;
        let (recall_v2a, recall_a2v) = self.retrieval(cfg, &emb)?;
        let mut report = EvalReport {
            config_fingerprint: fingerprint.into(),
            retrieval_samples: self.data.test.len(),
            recall_v2a,
            recall_a2v,
            ..EvalReport::default()
        };
        let count = cfg.eval.generation_samples;
        if !generation || count == 0 {
            return Ok((report, None));
        }
        let gen = self.generate(params, cfg, &emb, count, cfg.eval.steps(&cfg.model))?;
        let probe = self.train_probe(params, cfg)?;
        let m = self.generation_metrics(params, cfg, &probe, &gen)?;
        report.generation_samples = count;
        report.kld = Some(m.kld);
        report.fad = Some(m.fad);
        report.align_acc = Some(m.align_acc);
        Ok((report, Some(gen)))
    }

    /// Generate for the first `count` test videos twice, once conditioned on
    /// the matching video and once on a video half the batch away, with the
    /// same noise, and score both against the true band energies.
    pub fn conditioning(&self, params: &ParamStore, cfg: &ExperimentConfig, count: usize) -> Result<Conditioning> {
        if count < 2 || count > self.data.test.len() {
            return Err(Error::Argument(format!(
                "conditioning needs 2..={} samples",
                self.data.test.len()
            )));
        }
        let emb = self.embed_test(params, cfg)?;
        let steps = cfg.eval.steps(&cfg.model);
        let matched = self.generate(params, cfg, &emb, count, steps)?;
        let perm: Vec<usize> = (0..count).map(|i| (i + count / 2) % count).collect();
        let shuffled_cond = model::select_levels(&emb.video, &perm);
        let shuffled = model::generate(
            params,
            &cfg.model,
            &cfg.shapes(),
            Some(&shuffled_cond),
            &matched.seeds,
            cfg.eval.sampler,
            steps,
            cfg.eval.chunk,
        )?;
        let mse = |gen: &Tensor, real: &Tensor| {
            let (g, r) = (band_energy(&cfg.corpus, gen), band_energy(&cfg.corpus, real));
            let n = (g.len() * g[0].len()) as f64;
            g.iter()
                .flatten()
                .zip(r.iter().flatten())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / n
        };
        let real = &self.data.test;
        Ok(Conditioning {
            matched_mse: (0..count)
                .map(|i| mse(&matched.spectrograms[i], &real[i].audio))
                .collect(),
            shuffled_mse: (0..count).map(|i| mse(&shuffled[i], &real[i].audio)).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transpose_swaps_indices() {
        let t = Tensor::new(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let u = transpose(&t);
        assert_eq!(u.shape(), &[3, 2]);
        assert_eq!(u.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn win_rate_counts_strict_wins() {
        let c = Conditioning {
            matched_mse: vec![0.1, 0.5, 0.2, 0.3],
            shuffled_mse: vec![0.2, 0.4, 0.2, 0.9],
        };
        assert_eq!(c.win_rate(), 50.0);
    }
}
