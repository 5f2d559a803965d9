//! Synthetic paired video/audio corpus with known multi-scale correspondence.
//!
//! Every pair is rendered from a [`LatentTruth`]: one trajectory per scale
//! level (level 1 is the coarsest and slowest). The video shows level `l` as
//! a horizontal stripe whose intensity follows the trajectory, textured by a
//! class-specific scrolling pattern. The audio spectrogram carries level `l`
//! in its own contiguous frequency band, as an additive log-energy offset on
//! top of a class-specific spectral comb. Bands are disjoint, so editing one
//! trajectory changes exactly one band.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rawio;
use crate::tensor::Tensor;

const STREAM_LATENT: u64 = 0;
const STREAM_VIDEO_NOISE: u64 = 1;
const STREAM_AUDIO_NOISE: u64 = 2;
const STREAM_SWAP: u64 = 3;

/// Log-energy floor of the rendered spectrogram.
const AUDIO_BASE: f64 = -2.0;
/// Peak-to-mean depth of the class comb, in log units.
const COMB_DEPTH: f64 = 0.5;
/// Intensity gain applied to trajectory values in the video.
const VIDEO_GAIN: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Video frames per clip (T).
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Spectrogram time steps (T_a).
    pub audio_frames: usize,
    /// Spectrogram frequency bins (F_a).
    pub freq_bins: usize,
    /// Number of latent scale levels (L).
    pub levels: usize,
    /// Number of categories (C).
    pub classes: usize,
    /// Trajectory values are drawn uniformly from `[-amplitude, amplitude]`.
    pub amplitude: f64,
    pub video_noise: f64,
    pub audio_noise: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            frames: 16,
            height: 32,
            width: 32,
            audio_frames: 64,
            freq_bins: 64,
            levels: 3,
            classes: 8,
            amplitude: 1.0,
            video_noise: 0.2,
            audio_noise: 0.5,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
            ("audio_frames", self.audio_frames),
            ("freq_bins", self.freq_bins),
            ("levels", self.levels),
            ("classes", self.classes),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("corpus.{name} must be positive")));
            }
        }
        if self.freq_bins < self.levels || self.height < self.levels {
            return Err(Error::Config(format!(
                "{} levels need at least that many frequency bins and pixel rows",
                self.levels
            )));
        }
        if self.width <= self.classes {
            return Err(Error::Config(
                "corpus.width must exceed corpus.classes so class textures stay distinct".into(),
            ));
        }
        for (name, v) in [
            ("amplitude", self.amplitude),
            ("video_noise", self.video_noise),
            ("audio_noise", self.audio_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("corpus.{name} must be finite and >= 0")));
            }
        }
        let lens = self.trajectory_lengths();
        if lens.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "trajectory lengths {lens:?} must strictly increase; reduce levels or add frames"
            )));
        }
        Ok(())
    }

    /// Length of each scale's trajectory, coarsest first: `ceil(T / 2^(L-l))`.
    pub fn trajectory_lengths(&self) -> Vec<usize> {
        (1..=self.levels)
            .map(|l| {
                let shift = (self.levels - l).min(63) as u32;
                self.frames.div_ceil(1usize << shift).max(1)
            })
            .collect()
    }

    /// Half-open frequency-bin range of the band carrying `level` (1-based).
    pub fn band(&self, level: usize) -> (usize, usize) {
        (
            (level - 1) * self.freq_bins / self.levels,
            level * self.freq_bins / self.levels,
        )
    }

    /// Half-open pixel-row range of the stripe carrying `level` (1-based).
    pub fn stripe(&self, level: usize) -> (usize, usize) {
        (
            (level - 1) * self.height / self.levels,
            level * self.height / self.levels,
        )
    }

    pub fn video_shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, 3]
    }

    pub fn audio_shape(&self) -> [usize; 2] {
        [self.audio_frames, self.freq_bins]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentTruth {
    /// One trajectory per scale level, coarsest first.
    pub scale_trajectories: Vec<Vec<f64>>,
    pub class_id: usize,
    pub seed: u64,
}

impl LatentTruth {
    /// Value of `level`'s trajectory at position `step` of a sequence of
    /// `total` steps (piecewise-constant upsampling).
    pub fn value_at(&self, level: usize, step: usize, total: usize) -> f64 {
        let traj = &self.scale_trajectories[level - 1];
        traj[step * traj.len() / total]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawPair {
    /// `T×H×W×3`, values in `[0, 1]`.
    pub video: Tensor,
    /// `T_a×F_a` log-magnitude spectrogram.
    pub audio: Tensor,
    /// The latent state the video was rendered from.
    pub truth: LatentTruth,
    pub aligned: bool,
}

#[derive(Clone, Copy, Debug)]
pub enum NegativeMode<'a> {
    /// Cyclically roll the audio forward by `k` frames.
    TemporalShift(usize),
    /// Redraw one scale's trajectory (1-based level) and re-render the audio.
    ScaleSwap(usize),
    /// Keep the video, take the audio of `donor`.
    CrossSample(&'a RawPair),
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn draw_trajectory(rng: &mut ChaCha8Rng, len: usize, amplitude: f64) -> Vec<f64> {
    (0..len)
        .map(|_| {
            if amplitude > 0.0 {
                rng.gen_range(-amplitude..=amplitude)
            } else {
                0.0
            }
        })
        .collect()
}

pub fn sample_truth(cfg: &CorpusConfig, seed: u64) -> Result<LatentTruth> {
    cfg.validate()?;
    let mut rng = rng_stream(seed, STREAM_LATENT);
    let class_id = rng.gen_range(0..cfg.classes);
    Ok(truth_with_class(cfg, seed, class_id, &mut rng))
}

fn truth_with_class(cfg: &CorpusConfig, seed: u64, class_id: usize, rng: &mut ChaCha8Rng) -> LatentTruth {
    let scale_trajectories = cfg
        .trajectory_lengths()
        .into_iter()
        .map(|len| draw_trajectory(rng, len, cfg.amplitude))
        .collect();
    LatentTruth {
        scale_trajectories,
        class_id,
        seed,
    }
}

/// Class texture multiplier in `[0.5, 1.5]`; averages to exactly 1 over a row.
fn texture(class_id: usize, x: usize, width: usize, channel: usize) -> f64 {
    let k = (class_id + 1) as f64;
    1.0 + 0.5 * (2.0 * PI * k * x as f64 / width as f64 + 2.0 * PI * channel as f64 / 3.0).sin()
}

/// Zero-mean class comb across the bins of one band.
fn comb(class_id: usize, width: usize) -> Vec<f64> {
    let k = (class_id + 1) as f64;
    let raw: Vec<f64> = (0..width)
        .map(|i| (2.0 * PI * k * (i as f64 + 0.5) / width as f64).cos())
        .collect();
    let mean = raw.iter().sum::<f64>() / width as f64;
    raw.iter().map(|v| COMB_DEPTH * (v - mean)).collect()
}

pub fn render_video(cfg: &CorpusConfig, truth: &LatentTruth) -> Tensor {
    let [t_len, h, w, _] = cfg.video_shape();
    let mut noise = rng_stream(truth.seed, STREAM_VIDEO_NOISE);
    let mut out = vec![0.0; t_len * h * w * 3];
    let textures: Vec<f64> = (0..w * 3).map(|i| texture(truth.class_id, i / 3, w, i % 3)).collect();
    let level_of_row: Vec<usize> = (0..h).map(|y| y * cfg.levels / h + 1).collect();
    for t in 0..t_len {
        let values: Vec<f64> = (1..=cfg.levels).map(|l| truth.value_at(l, t, t_len)).collect();
        for (y, &level) in level_of_row.iter().enumerate() {
            // Faster levels scroll faster.
            let shift = t * (1 << (level - 1).min(8)) % w;
            let x_val = values[level - 1];
            for x in 0..w {
                let src = ((x + shift) % w) * 3;
                for c in 0..3 {
                    let n: f64 = if cfg.video_noise > 0.0 {
                        noise.sample::<f64, _>(StandardNormal) * cfg.video_noise
                    } else {
                        0.0
                    };
                    let v = 0.5 + VIDEO_GAIN * x_val * textures[src + c] + n;
                    out[((t * h + y) * w + x) * 3 + c] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    Tensor::new(cfg.video_shape().to_vec(), out)
}

pub fn render_audio(cfg: &CorpusConfig, truth: &LatentTruth) -> Tensor {
    let [t_len, f_len] = cfg.audio_shape();
    let mut noise = rng_stream(truth.seed, STREAM_AUDIO_NOISE);
    let noise_field: Vec<f64> = (0..t_len * f_len)
        .map(|_| {
            if cfg.audio_noise > 0.0 {
                noise.sample::<f64, _>(StandardNormal) * cfg.audio_noise
            } else {
                0.0
            }
        })
        .collect();
    let mut out = vec![0.0; t_len * f_len];
    for level in 1..=cfg.levels {
        let (lo, hi) = cfg.band(level);
        let pattern = comb(truth.class_id, hi - lo);
        for t in 0..t_len {
            let x_val = truth.value_at(level, t, t_len);
            for f in lo..hi {
                out[t * f_len + f] = AUDIO_BASE + pattern[f - lo] + x_val + noise_field[t * f_len + f];
            }
        }
    }
    Tensor::new(cfg.audio_shape().to_vec(), out)
}

pub fn generate_pair(cfg: &CorpusConfig, seed: u64) -> Result<RawPair> {
    let truth = sample_truth(cfg, seed)?;
    Ok(render_pair(cfg, truth))
}

/// Like [`generate_pair`] but with a fixed category.
pub fn generate_pair_with_class(cfg: &CorpusConfig, seed: u64, class_id: usize) -> Result<RawPair> {
    cfg.validate()?;
    if class_id >= cfg.classes {
        return Err(Error::Argument(format!(
            "class {class_id} outside [0, {})",
            cfg.classes
        )));
    }
    let mut rng = rng_stream(seed, STREAM_LATENT);
    let _ = rng.gen_range(0..cfg.classes);
    let truth = truth_with_class(cfg, seed, class_id, &mut rng);
    Ok(render_pair(cfg, truth))
}

fn render_pair(cfg: &CorpusConfig, truth: LatentTruth) -> RawPair {
    RawPair {
        video: render_video(cfg, &truth),
        audio: render_audio(cfg, &truth),
        truth,
        aligned: true,
    }
}

/// `out[t] = audio[(t - k) mod T_a]`.
pub fn roll_audio(audio: &Tensor, k: usize) -> Tensor {
    let (t_len, f_len) = (audio.shape()[0], audio.shape()[1]);
    let mut out = vec![0.0; audio.numel()];
    for t in 0..t_len {
        let src = (t + t_len - k % t_len) % t_len;
        out[t * f_len..(t + 1) * f_len].copy_from_slice(audio.row(src));
    }
    Tensor::new(audio.shape().to_vec(), out)
}

pub fn make_negative(cfg: &CorpusConfig, pair: &RawPair, mode: NegativeMode<'_>) -> Result<RawPair> {
    if !pair.aligned {
        return Err(Error::Argument("negatives are built from aligned pairs only".into()));
    }
    let audio = match mode {
        NegativeMode::TemporalShift(k) => {
            if k == 0 || k >= cfg.audio_frames {
                return Err(Error::Argument(format!(
                    "shift {k} outside [1, {}]",
                    cfg.audio_frames - 1
                )));
            }
            roll_audio(&pair.audio, k)
        }
        NegativeMode::ScaleSwap(level) => {
            if level == 0 || level > cfg.levels {
                return Err(Error::Argument(format!("level {level} outside [1, {}]", cfg.levels)));
            }
            let mut swapped = pair.truth.clone();
            let mut rng = rng_stream(pair.truth.seed, STREAM_SWAP);
            let len = swapped.scale_trajectories[level - 1].len();
            swapped.scale_trajectories[level - 1] = draw_trajectory(&mut rng, len, cfg.amplitude.max(1e-3));
            render_audio(cfg, &swapped)
        }
        NegativeMode::CrossSample(donor) => {
            if donor.truth.seed == pair.truth.seed {
                return Err(Error::Argument(
                    "cross-sample donor must come from a different seed".into(),
                ));
            }
            donor.audio.clone()
        }
    };
    Ok(RawPair {
        video: pair.video.clone(),
        audio,
        truth: pair.truth.clone(),
        aligned: false,
    })
}

/// Mean log-energy of each level's band per audio frame: `[L][T_a]`.
pub fn band_energy(cfg: &CorpusConfig, audio: &Tensor) -> Vec<Vec<f64>> {
    let f_len = cfg.freq_bins;
    (1..=cfg.levels)
        .map(|level| {
            let (lo, hi) = cfg.band(level);
            (0..cfg.audio_frames)
                .map(|t| audio.data()[t * f_len + lo..t * f_len + hi].iter().sum::<f64>() / (hi - lo) as f64)
                .collect()
        })
        .collect()
}

/// Mean intensity of each level's stripe per video frame: `[L][T]`.
pub fn stripe_intensity(cfg: &CorpusConfig, video: &Tensor) -> Vec<Vec<f64>> {
    let [t_len, h, w, _] = cfg.video_shape();
    let _ = h;
    (1..=cfg.levels)
        .map(|level| {
            let (lo, hi) = cfg.stripe(level);
            (0..t_len)
                .map(|t| {
                    let frame = &video.data()[(t * cfg.height + lo) * w * 3..(t * cfg.height + hi) * w * 3];
                    frame.iter().sum::<f64>() / frame.len() as f64
                })
                .collect()
        })
        .collect()
}

/// A corpus described by its seeds; pairs are rendered on demand.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub seed: u64,
    pub len: usize,
}

impl Corpus {
    pub fn new(config: CorpusConfig, seed: u64, len: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, seed, len })
    }

    /// Per-sample seed, `corpus_seed ⊕ index`.
    pub fn sample_seed(&self, index: usize) -> u64 {
        self.seed ^ index as u64
    }

    pub fn pair(&self, index: usize) -> RawPair {
        generate_pair(&self.config, self.sample_seed(index)).expect("validated corpus config")
    }

    pub fn pairs(&self) -> Vec<RawPair> {
        (0..self.len).map(|i| self.pair(i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub index: usize,
    pub seed: u64,
    pub class_id: usize,
    pub aligned: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format: String,
    pub count: usize,
    /// Per-sample shapes; the arrays on disk prepend `count`.
    pub video_shape: Vec<usize>,
    pub audio_shape: Vec<usize>,
    pub dtype: String,
    pub video_file: String,
    pub audio_file: String,
    pub config: CorpusConfig,
    pub entries: Vec<CorpusEntry>,
}

pub const CORPUS_FORMAT: &str = "avpyramid-corpus-v1";

/// Persist pairs as `video.f32`, `audio.f32` and `manifest.json`.
pub fn write_corpus(dir: &Path, cfg: &CorpusConfig, pairs: &[RawPair]) -> Result<CorpusManifest> {
    fs::create_dir_all(dir)?;
    let mut video = Vec::with_capacity(pairs.len() * cfg.video_shape().iter().product::<usize>());
    let mut audio = Vec::with_capacity(pairs.len() * cfg.audio_shape().iter().product::<usize>());
    let mut entries = Vec::with_capacity(pairs.len());
    for (index, p) in pairs.iter().enumerate() {
        if p.video.shape() != cfg.video_shape() || p.audio.shape() != cfg.audio_shape() {
            return Err(Error::Input(format!("pair {index} does not match the corpus shapes")));
        }
        video.extend_from_slice(p.video.data());
        audio.extend_from_slice(p.audio.data());
        entries.push(CorpusEntry {
            index,
            seed: p.truth.seed,
            class_id: p.truth.class_id,
            aligned: p.aligned,
        });
    }
    let manifest = CorpusManifest {
        format: CORPUS_FORMAT.into(),
        count: pairs.len(),
        video_shape: cfg.video_shape().to_vec(),
        audio_shape: cfg.audio_shape().to_vec(),
        dtype: "f32le".into(),
        video_file: "video.f32".into(),
        audio_file: "audio.f32".into(),
        config: cfg.clone(),
        entries,
    };
    rawio::write_f32_file(&dir.join(&manifest.video_file), &video)?;
    rawio::write_f32_file(&dir.join(&manifest.audio_file), &audio)?;
    rawio::write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Loaded corpus arrays; `video[i]` and `audio[i]` follow `manifest.entries[i]`.
pub struct StoredCorpus {
    pub manifest: CorpusManifest,
    pub video: Vec<Tensor>,
    pub audio: Vec<Tensor>,
}

pub fn read_corpus(dir: &Path) -> Result<StoredCorpus> {
    let manifest: CorpusManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.format != CORPUS_FORMAT {
        return Err(Error::Format(format!("unknown corpus format {:?}", manifest.format)));
    }
    let split = |data: Vec<f64>, shape: &[usize]| -> Result<Vec<Tensor>> {
        let per: usize = shape.iter().product();
        if data.len() != per * manifest.count {
            return Err(Error::Format(format!(
                "array holds {} values, manifest implies {}",
                data.len(),
                per * manifest.count
            )));
        }
        Ok(data
            .chunks_exact(per.max(1))
            .map(|c| Tensor::new(shape.to_vec(), c.to_vec()))
            .collect())
    };
    let video = split(
        rawio::read_f32_file(&dir.join(&manifest.video_file))?,
        &manifest.video_shape,
    )?;
    let audio = split(
        rawio::read_f32_file(&dir.join(&manifest.audio_file))?,
        &manifest.audio_shape,
    )?;
    Ok(StoredCorpus { manifest, video, audio })
}
