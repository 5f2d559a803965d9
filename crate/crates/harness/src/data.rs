//! Corpus splits and the in-memory training set.

use avpyramid_core::model::Batch;
use avpyramid_core::synthpair::{Corpus, CorpusConfig, RawPair};
use avpyramid_core::{Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Probe,
    Reference,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Test, Split::Probe, Split::Reference];

    pub fn id(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
            Split::Probe => 3,
            Split::Reference => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Probe => "probe",
            Split::Reference => "reference",
        }
    }
}

/// Seed of a derived stream: `base ⊕ (id << 40)`.
pub fn derive_seed(base: u64, id: u64) -> u64 {
    base ^ (id << 40)
}

pub fn split_corpus(cfg: &CorpusConfig, seed: u64, split: Split, len: usize) -> Result<Corpus> {
    Corpus::new(cfg.clone(), derive_seed(seed, split.id()), len)
}

/// Rendered training pairs kept as `f32` to halve the footprint.
pub struct PairCache {
    video_shape: Vec<usize>,
    audio_shape: Vec<usize>,
    video: Vec<f32>,
    audio: Vec<f32>,
    len: usize,
}

impl PairCache {
    pub fn render(corpus: &Corpus) -> Self {
        let video_shape = corpus.config.video_shape().to_vec();
        let audio_shape = corpus.config.audio_shape().to_vec();
        let (vn, an) = (
            video_shape.iter().product::<usize>(),
            audio_shape.iter().product::<usize>(),
        );
        let mut video = Vec::with_capacity(corpus.len * vn);
        let mut audio = Vec::with_capacity(corpus.len * an);
        for i in 0..corpus.len {
            let p = corpus.pair(i);
            video.extend(p.video.data().iter().map(|&v| v as f32));
            audio.extend(p.audio.data().iter().map(|&v| v as f32));
        }
        Self {
            video_shape,
            audio_shape,
            video,
            audio,
            len: corpus.len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// A prefix of this cache, for data-scaling sweeps.
    pub fn truncated(&self, len: usize) -> Self {
        let len = len.min(self.len);
        let (vn, an) = (self.video.len() / self.len.max(1), self.audio.len() / self.len.max(1));
        Self {
            video_shape: self.video_shape.clone(),
            audio_shape: self.audio_shape.clone(),
            video: self.video[..len * vn].to_vec(),
            audio: self.audio[..len * an].to_vec(),
            len,
        }
    }

    pub fn batch(&self, idx: &[usize]) -> Batch {
        let gather = |data: &[f32], shape: &[usize]| {
            let per: usize = shape.iter().product();
            let mut out = Vec::with_capacity(idx.len() * per);
            for &i in idx {
                out.extend(data[i * per..(i + 1) * per].iter().map(|&v| v as f64));
            }
            let mut full = vec![idx.len()];
            full.extend_from_slice(shape);
            Tensor::new(full, out)
        };
        Batch {
            video: gather(&self.video, &self.video_shape),
            audio: gather(&self.audio, &self.audio_shape),
        }
    }
}

/// The evaluation splits, rendered at full precision.
pub struct EvalData {
    pub test: Vec<RawPair>,
    pub probe: Vec<RawPair>,
    pub reference: Vec<RawPair>,
}

impl EvalData {
    pub fn render(cfg: &CorpusConfig, seed: u64, test: usize, probe: usize, reference: usize) -> Result<Self> {
        Ok(Self {
            test: split_corpus(cfg, seed, Split::Test, test)?.pairs(),
            probe: split_corpus(cfg, seed, Split::Probe, probe)?.pairs(),
            reference: split_corpus(cfg, seed, Split::Reference, reference)?.pairs(),
        })
    }
}
