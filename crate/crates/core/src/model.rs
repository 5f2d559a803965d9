//! The full model: encoders, projection heads, feature pyramids and the
//! conditional denoiser, plus batched training losses and inference.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoders::{self, EncoderConfig, InputShapes, Modality};
use crate::error::{Error, Result};
use crate::msa::{self, MsaConfig};
use crate::msd::{self, Denoiser, MsdConfig, MsdDraw, NoiseSchedule};
use crate::params::{Bound, ParamStore};
use crate::pyramid::{self, PyramidConfig};
use crate::synthpair::RawPair;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub pyramid: PyramidConfig,
    pub msa: MsaConfig,
    pub msd: MsdConfig,
}

impl ModelConfig {
    pub fn validate(&self, shapes: &InputShapes) -> Result<()> {
        self.encoder.validate(shapes)?;
        self.pyramid.validate(shapes.feature_steps())?;
        self.msa.validate()?;
        self.msd.validate(shapes.audio_frames, shapes.freq_bins)
    }

    pub fn levels(&self) -> usize {
        self.pyramid.levels
    }
}

/// Every trainable tensor of the model for inputs of `shapes`, drawn from
/// `seed`.
pub fn init_params(cfg: &ModelConfig, shapes: &InputShapes, seed: u64) -> ParamStore {
    let d = cfg.encoder.embed_dim;
    let mut store = encoders::init_encoder_params(&cfg.encoder, seed);
    store.extend(pyramid::init_pyramid_params(
        &cfg.pyramid,
        d,
        cfg.encoder.video_map_channels(),
        seed,
    ));
    store.extend(msd::init_denoiser_params(&cfg.msd, d, shapes.freq_bins, seed));
    store
}

/// A batch of paired clips.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, T, H, W, 3]`.
    pub video: Tensor,
    /// `[B, T_a, F_a]`.
    pub audio: Tensor,
}

impl Batch {
    pub fn from_pairs(pairs: &[&RawPair]) -> Self {
        let video: Vec<Tensor> = pairs.iter().map(|p| p.video.clone()).collect();
        let audio: Vec<Tensor> = pairs.iter().map(|p| p.audio.clone()).collect();
        Self {
            video: Tensor::stack(&video),
            audio: Tensor::stack(&audio),
        }
    }

    pub fn len(&self) -> usize {
        self.video.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Projected, pyramided video features `[B, T_l, D]` per level.
pub fn video_levels(g: &mut Graph, p: &Bound, cfg: &ModelConfig, shapes: &InputShapes, video: Var) -> Result<Vec<Var>> {
    let vf = encoders::encode_video(g, p, shapes, video)?;
    let ve = encoders::project_embed(g, p, Modality::Video, vf.sequence);
    pyramid::video_pyramid(g, p, &cfg.pyramid, ve, cfg.pyramid.spatial.then_some(vf.spatial_maps))
}

/// Projected, pyramided audio features `[B, T_l, D]` per level.
pub fn audio_levels(g: &mut Graph, p: &Bound, cfg: &ModelConfig, shapes: &InputShapes, audio: Var) -> Result<Vec<Var>> {
    let af = encoders::encode_audio(g, p, shapes, audio)?;
    let ae = encoders::project_embed(g, p, Modality::Audio, af);
    pyramid::temporal_pyramid(g, p, &cfg.pyramid, Modality::Audio, ae)
}

/// Relative weights of the two objectives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub msa: f64,
    pub msd: f64,
}

pub struct TrainingLoss {
    pub total: Var,
    pub msa_per_scale: Vec<Var>,
    pub msa_total: Option<Var>,
    pub msd_term1: Option<Var>,
    pub msd_term2: Option<Var>,
}

/// `w_msa·L_MSA + w_msd·L_MSD` for one batch. Objectives with zero weight
/// are not evaluated. `terminal` enables the terminal-step diffusion term.
#[allow(clippy::too_many_arguments)]
pub fn training_loss(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    shapes: &InputShapes,
    schedule: &NoiseSchedule,
    batch: &Batch,
    weights: LossWeights,
    draw: &MsdDraw,
    terminal: bool,
) -> Result<TrainingLoss> {
    if weights.msa <= 0.0 && weights.msd <= 0.0 {
        return Err(Error::Config("at least one loss weight must be positive".into()));
    }
    let video = g.constant(batch.video.clone());
    let pv = video_levels(g, p, cfg, shapes, video)?;
    let mut parts = Vec::new();
    let mut out = TrainingLoss {
        total: pv[0],
        msa_per_scale: Vec::new(),
        msa_total: None,
        msd_term1: None,
        msd_term2: None,
    };
    if weights.msa > 0.0 {
        let audio = g.constant(batch.audio.clone());
        let pa = audio_levels(g, p, cfg, shapes, audio)?;
        let l = msa::msa_loss(g, &pa, &pv, &cfg.msa)?;
        parts.push(g.scale(l.total, weights.msa));
        out.msa_per_scale = l.per_scale;
        out.msa_total = Some(l.total);
    }
    if weights.msd > 0.0 {
        let x0 = cfg.msd.normalize(&batch.audio);
        let l = msd::msd_loss(g, p, &cfg.msd, schedule, &x0, Some(&pv), cfg.levels(), draw, terminal)?;
        parts.push(g.scale(l.total, weights.msd));
        out.msd_term1 = Some(l.term1);
        out.msd_term2 = l.term2;
    }
    let mut total = parts[0];
    for &x in &parts[1..] {
        total = g.add(total, x);
    }
    out.total = total;
    Ok(out)
}

/// Draw the diffusion randomness for a batch.
pub fn draw_for(cfg: &ModelConfig, shapes: &InputShapes, batch_size: usize, rng: &mut ChaCha8Rng) -> MsdDraw {
    MsdDraw::sample(&[batch_size, shapes.audio_frames, shapes.freq_bins], cfg.msd.steps, rng)
}

/// Inference-time pyramids, one `[N, T_l, D]` tensor per level.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub audio: Vec<Tensor>,
    pub video: Vec<Tensor>,
}

fn concat_batches(parts: Vec<Vec<Tensor>>) -> Vec<Tensor> {
    let levels = parts.first().map(Vec::len).unwrap_or(0);
    (0..levels)
        .map(|l| {
            let mut rows = Vec::new();
            for p in &parts {
                for i in 0..p[l].shape()[0] {
                    rows.push(p[l].index0(i));
                }
            }
            Tensor::stack(&rows)
        })
        .collect()
}

/// Embed video clips `[T, H, W, 3]` in chunks of `chunk`.
pub fn embed_videos(
    params: &ParamStore,
    cfg: &ModelConfig,
    shapes: &InputShapes,
    videos: &[&Tensor],
    chunk: usize,
) -> Result<Vec<Tensor>> {
    let parts = videos
        .chunks(chunk.max(1))
        .map(|c| {
            let mut g = Graph::new();
            let p = params.bind(&mut g, false);
            let owned: Vec<Tensor> = c.iter().map(|t| (*t).clone()).collect();
            let v = g.constant(Tensor::stack(&owned));
            let levels = video_levels(&mut g, &p, cfg, shapes, v)?;
            Ok(levels.iter().map(|&x| g.value(x).clone()).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(concat_batches(parts))
}

/// Embed spectrograms `[T_a, F_a]` in chunks of `chunk`.
pub fn embed_audios(
    params: &ParamStore,
    cfg: &ModelConfig,
    shapes: &InputShapes,
    audios: &[&Tensor],
    chunk: usize,
) -> Result<Vec<Tensor>> {
    let parts = audios
        .chunks(chunk.max(1))
        .map(|c| {
            let mut g = Graph::new();
            let p = params.bind(&mut g, false);
            let owned: Vec<Tensor> = c.iter().map(|t| (*t).clone()).collect();
            let a = g.constant(Tensor::stack(&owned));
            let levels = audio_levels(&mut g, &p, cfg, shapes, a)?;
            Ok(levels.iter().map(|&x| g.value(x).clone()).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(concat_batches(parts))
}

pub fn embed_pairs(
    params: &ParamStore,
    cfg: &ModelConfig,
    shapes: &InputShapes,
    pairs: &[RawPair],
    chunk: usize,
) -> Result<Embeddings> {
    let videos: Vec<&Tensor> = pairs.iter().map(|p| &p.video).collect();
    let audios: Vec<&Tensor> = pairs.iter().map(|p| &p.audio).collect();
    Ok(Embeddings {
        audio: embed_audios(params, cfg, shapes, &audios, chunk)?,
        video: embed_videos(params, cfg, shapes, &videos, chunk)?,
    })
}

/// Rows `idx` of every level.
pub fn select_levels(levels: &[Tensor], idx: &[usize]) -> Vec<Tensor> {
    levels
        .iter()
        .map(|t| Tensor::stack(&idx.iter().map(|&i| t.index0(i)).collect::<Vec<_>>()))
        .collect()
}

/// Generate one spectrogram (in data units) per video, conditioned on the
/// given video pyramids (`[N, T_l, D]` per level). Sample `i` uses
/// `seeds[i]`. `None` generates unconditionally.
#[allow(clippy::too_many_arguments)]
pub fn generate(
    params: &ParamStore,
    cfg: &ModelConfig,
    shapes: &InputShapes,
    cond: Option<&[Tensor]>,
    seeds: &[u64],
    mode: msd::SamplerMode,
    n_steps: usize,
    chunk: usize,
) -> Result<Vec<Tensor>> {
    let schedule = cfg.msd.schedule()?;
    let mut out = Vec::with_capacity(seeds.len());
    let chunk = chunk.max(1);
    for start in (0..seeds.len()).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(seeds.len())).collect();
        let levels = cond.map(|c| select_levels(c, &idx));
        let model = Denoiser {
            params,
            cfg: &cfg.msd,
            cond: levels.as_deref(),
            cond_levels: cfg.levels(),
        };
        let x = msd::sample(
            &model,
            [shapes.audio_frames, shapes.freq_bins],
            &schedule,
            mode,
            n_steps,
            &seeds[start..start + idx.len()],
        )?;
        let x = cfg.msd.denormalize(&x);
        out.extend((0..idx.len()).map(|i| x.index0(i)));
    }
    Ok(out)
}

/// Per-tensor gradients of the training loss, keyed by parameter name.
pub fn gradients(g: &Graph, p: &Bound, loss: Var) -> BTreeMap<String, Tensor> {
    p.collect(g, &g.backward(loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthpair::{generate_pair, CorpusConfig};
    use rand::SeedableRng;

    fn small() -> (ModelConfig, InputShapes, Vec<RawPair>) {
        let corpus = CorpusConfig {
            frames: 8,
            height: 16,
            width: 16,
            audio_frames: 32,
            freq_bins: 16,
            ..CorpusConfig::default()
        };
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                embed_dim: 8,
                video_channels: vec![2, 2, 3],
                audio_channels: vec![2, 2, 3],
                projection_gain: 1.0,
            },
            msd: MsdConfig {
                steps: 10,
                channels: vec![2, 3, 3],
                step_embed_dim: 4,
                sample_steps: 5,
                ..MsdConfig::default()
            },
            ..ModelConfig::default()
        };
        let pairs = (0..3).map(|i| generate_pair(&corpus, i).unwrap()).collect();
        (cfg, InputShapes::from_corpus(&corpus), pairs)
    }

    #[test]
    fn every_parameter_receives_a_gradient_in_joint_training() {
        let (cfg, shapes, pairs) = small();
        cfg.validate(&shapes).unwrap();
        let params = init_params(&cfg, &shapes, 1);
        let batch = Batch::from_pairs(&pairs.iter().collect::<Vec<_>>());
        let schedule = cfg.msd.schedule().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draw = draw_for(&cfg, &shapes, 3, &mut rng);
        let mut g = Graph::new();
        let p = params.bind(&mut g, true);
        let w = LossWeights { msa: 1.0, msd: 1.0 };
        let l = training_loss(&mut g, &p, &cfg, &shapes, &schedule, &batch, w, &draw, true).unwrap();
        assert_eq!(l.msa_per_scale.len(), 3);
        let grads = gradients(&g, &p, l.total);
        for (name, gr) in &grads {
            assert!(gr.is_finite(), "{name}");
            assert!(gr.sq_norm() > 0.0, "{name} has no gradient");
        }
    }

    #[test]
    fn inference_matches_training_graph_and_generation_has_data_shape() {
        let (cfg, shapes, pairs) = small();
        let params = init_params(&cfg, &shapes, 3);
        let emb = embed_pairs(&params, &cfg, &shapes, &pairs, 2).unwrap();
        assert_eq!(emb.video.len(), 3);
        assert_eq!(emb.video[0].shape(), &[3, 8, 8]);
        assert_eq!(emb.audio[2].shape(), &[3, 2, 8]);
        let one = embed_pairs(&params, &cfg, &shapes, &pairs[1..2], 2).unwrap();
        assert!(one.video[0].max_abs_diff(&select_levels(&emb.video, &[1])[0]) < 1e-12);

        let gen = generate(
            &params,
            &cfg,
            &shapes,
            Some(&emb.video),
            &[5, 6, 7],
            msd::SamplerMode::Deterministic,
            5,
            2,
        )
        .unwrap();
        assert_eq!(gen.len(), 3);
        assert_eq!(gen[0].shape(), &[32, 16]);
        let again = generate(
            &params,
            &cfg,
            &shapes,
            Some(&emb.video),
            &[5, 6, 7],
            msd::SamplerMode::Deterministic,
            5,
            3,
        )
        .unwrap();
        assert_eq!(gen, again);
    }
}
