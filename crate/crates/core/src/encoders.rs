//! Audio and video encoders plus the projection heads into the shared
//! embedding space.
//!
//! Audio: three strided time–frequency convolutions (strides `(2,2)`,
//! `(2,2)`, `(1,2)`), SiLU after each, mean over frequency, then a per-step
//! linear map to `D` channels. The time axis shrinks by `r = 4`.
//!
//! Video: a per-frame ladder of three stride-2 convolutions with SiLU,
//! global spatial mean, then one temporal convolution (kernel 3) to `D`
//! channels. The time axis is kept, so both modalities yield `T_f = T`
//! steps when `T_a = 4·T`.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, Bound, ParamStore};
use crate::synthpair::CorpusConfig;
use crate::tensor::Tensor;

/// Lower bound on every norm used as a divisor.
pub const NORM_EPS: f64 = 1e-12;

/// Temporal reduction of the audio encoder.
pub const AUDIO_REDUCTION: usize = 4;

const AUDIO_STRIDES: [(usize, usize); 3] = [(2, 2), (2, 2), (1, 2)];
/// Video blocks as (kernel, stride, padding): a 4×4 patch stem, then two 3×3.
const VIDEO_BLOCKS: [(usize, usize, usize); 3] = [(4, 4, 0), (3, 2, 1), (3, 1, 1)];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Video,
}

impl Modality {
    pub fn key(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Video => "video",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// One sample's features: `T_f × D`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub features: Tensor,
    pub modality: Modality,
    /// 1 is the finest temporal resolution.
    pub scale_level: usize,
}

impl FeatureSequence {
    pub fn new(features: Tensor, modality: Modality, scale_level: usize) -> Result<Self> {
        if features.ndim() != 2 || features.shape()[0] == 0 {
            return Err(Error::Input(format!(
                "feature sequence must be T_f×D with T_f > 0, got {:?}",
                features.shape()
            )));
        }
        if !features.is_finite() {
            return Err(Error::Numeric("feature sequence holds non-finite values".into()));
        }
        Ok(Self {
            features,
            modality,
            scale_level,
        })
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn step(&self, t: usize) -> &[f64] {
        self.features.row(t)
    }

    /// Uniform mean over time.
    pub fn mean(&self) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d];
        for t in 0..self.len() {
            for (o, v) in out.iter_mut().zip(self.step(t)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= self.len() as f64);
        out
    }
}

/// Input tensor shapes the encoders are built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputShapes {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub audio_frames: usize,
    pub freq_bins: usize,
}

impl InputShapes {
    pub fn from_corpus(cfg: &CorpusConfig) -> Self {
        Self {
            frames: cfg.frames,
            height: cfg.height,
            width: cfg.width,
            audio_frames: cfg.audio_frames,
            freq_bins: cfg.freq_bins,
        }
    }

    /// Shared encoder output length.
    pub fn feature_steps(&self) -> usize {
        self.frames
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub video_channels: Vec<usize>,
    pub audio_channels: Vec<usize>,
    /// Initial scale of the projection heads.
    pub projection_gain: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            video_channels: vec![4, 8, 16],
            audio_channels: vec![4, 8, 16],
            projection_gain: 0.01,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, shapes: &InputShapes) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("encoder.embed_dim must be positive".into()));
        }
        if self.video_channels.len() != 3 || self.audio_channels.len() != 3 {
            return Err(Error::Config("encoders have exactly three convolution blocks".into()));
        }
        if self.video_channels.iter().chain(&self.audio_channels).any(|&c| c == 0) {
            return Err(Error::Config("encoder channel counts must be positive".into()));
        }
        if shapes.audio_frames != AUDIO_REDUCTION * shapes.frames {
            return Err(Error::Config(format!(
                "audio_frames ({}) must equal {AUDIO_REDUCTION}×frames ({}) so both encoders emit the same number of steps",
                shapes.audio_frames, shapes.frames
            )));
        }
        if shapes.height < 8 || shapes.width < 8 {
            return Err(Error::Config("video frames must be at least 8×8".into()));
        }
        if !(self.projection_gain.is_finite() && self.projection_gain >= 0.0) {
            return Err(Error::Config("encoder.projection_gain must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Channel width of the video encoder's last spatial map.
    pub fn video_map_channels(&self) -> usize {
        self.video_channels[2]
    }
}

fn conv_param(
    store: &mut ParamStore,
    name: &str,
    k: (usize, usize),
    cin: usize,
    cout: usize,
    gain: f64,
    rng: &mut ChaCha8Rng,
) {
    store.insert(
        format!("{name}.w"),
        fan_in_uniform(&[k.0, k.1, cin, cout], k.0 * k.1 * cin, gain, rng),
    );
    store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

fn linear_param(store: &mut ParamStore, name: &str, cin: usize, cout: usize, gain: f64, rng: &mut ChaCha8Rng) {
    store.insert(format!("{name}.w"), fan_in_uniform(&[cin, cout], cin, gain, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

pub fn init_encoder_params(cfg: &EncoderConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(10);
    let mut store = ParamStore::new();
    let d = cfg.embed_dim;

    let mut cin = 1;
    for (i, &c) in cfg.audio_channels.iter().enumerate() {
        conv_param(
            &mut store,
            &format!("audio.conv{}", i + 1),
            (3, 3),
            cin,
            c,
            1.0,
            &mut rng,
        );
        cin = c;
    }
    linear_param(&mut store, "audio.out", cin, d, 1.0, &mut rng);

    let mut cin = 3;
    for (i, (&c, &(k, _, _))) in cfg.video_channels.iter().zip(&VIDEO_BLOCKS).enumerate() {
        conv_param(
            &mut store,
            &format!("video.conv{}", i + 1),
            (k, k),
            cin,
            c,
            1.0,
            &mut rng,
        );
        cin = c;
    }
    conv_param(&mut store, "video.tconv", (3, 1), cin, d, 1.0, &mut rng);

    for m in [Modality::Audio, Modality::Video] {
        linear_param(&mut store, &format!("{m}.proj"), d, d, cfg.projection_gain, &mut rng);
    }
    store
}

fn conv_block(g: &mut Graph, p: &Bound, name: &str, x: Var, stride: (usize, usize), pad: usize) -> Var {
    let y = g.conv2d(
        x,
        p.var(&format!("{name}.w")),
        p.var(&format!("{name}.b")),
        stride,
        (pad, pad),
    );
    g.silu(y)
}

/// `audio[B, T_a, F_a]` → `[B, T_f, D]`.
pub fn encode_audio(g: &mut Graph, p: &Bound, shapes: &InputShapes, audio: Var) -> Result<Var> {
    let s = g.shape(audio).to_vec();
    if s.len() != 3 || s[1] != shapes.audio_frames || s[2] != shapes.freq_bins {
        return Err(Error::Input(format!(
            "audio batch {s:?} does not match [B, {}, {}]",
            shapes.audio_frames, shapes.freq_bins
        )));
    }
    let mut h = g.reshape(audio, &[s[0], s[1], s[2], 1]);
    for (i, &stride) in AUDIO_STRIDES.iter().enumerate() {
        h = conv_block(g, p, &format!("audio.conv{}", i + 1), h, stride, 1);
    }
    let h = g.mean_axis(h, 2);
    Ok(g.linear(h, p.var("audio.out.w"), p.var("audio.out.b")))
}

pub struct VideoFeatures {
    /// `[B, T, D]`.
    pub sequence: Var,
    /// Last spatial maps before pooling, `[B·T, h, w, C]`.
    pub spatial_maps: Var,
}

/// `video[B, T, H, W, 3]` → `[B, T, D]` plus the per-frame spatial maps.
pub fn encode_video(g: &mut Graph, p: &Bound, shapes: &InputShapes, video: Var) -> Result<VideoFeatures> {
    let s = g.shape(video).to_vec();
    if s.len() != 5 || s[1..] != [shapes.frames, shapes.height, shapes.width, 3] {
        return Err(Error::Input(format!(
            "video batch {s:?} does not match [B, {}, {}, {}, 3]",
            shapes.frames, shapes.height, shapes.width
        )));
    }
    let (b, t) = (s[0], s[1]);
    let mut h = g.reshape(video, &[b * t, s[2], s[3], 3]);
    for (i, &(_, stride, pad)) in VIDEO_BLOCKS.iter().enumerate() {
        h = conv_block(g, p, &format!("video.conv{}", i + 1), h, (stride, stride), pad);
    }
    let spatial_maps = h;
    let pooled = g.mean_axis(h, 1);
    let pooled = g.mean_axis(pooled, 1);
    let c = g.shape(pooled)[1];
    let seq = g.reshape(pooled, &[b, t, 1, c]);
    let seq = g.conv2d(seq, p.var("video.tconv.w"), p.var("video.tconv.b"), (1, 1), (1, 0));
    let d = g.shape(seq)[3];
    let sequence = g.reshape(seq, &[b, t, d]);
    Ok(VideoFeatures { sequence, spatial_maps })
}

/// Linear map then per-step L2 normalisation (`x / (‖x‖ + 1e-12)`).
pub fn project_embed(g: &mut Graph, p: &Bound, modality: Modality, features: Var) -> Var {
    let y = g.linear(
        features,
        p.var(&format!("{modality}.proj.w")),
        p.var(&format!("{modality}.proj.b")),
    );
    g.l2_normalize(y, NORM_EPS)
}

fn single(tensor: &Tensor) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(tensor.shape());
    tensor.clone().reshape(&shape)
}

fn to_sequence(g: &Graph, v: Var, modality: Modality) -> Result<FeatureSequence> {
    let s = g.shape(v);
    let features = g.value(v).clone().reshape(&[s[1], s[2]]);
    FeatureSequence::new(features, modality, 1)
}

/// Encode one spectrogram (`T_a × F_a`) without recording gradients.
pub fn encode_audio_sample(params: &ParamStore, shapes: &InputShapes, audio: &Tensor) -> Result<FeatureSequence> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(single(audio));
    let f = encode_audio(&mut g, &p, shapes, x)?;
    to_sequence(&g, f, Modality::Audio)
}

/// Encode one clip (`T × H × W × 3`) without recording gradients.
pub fn encode_video_sample(params: &ParamStore, shapes: &InputShapes, video: &Tensor) -> Result<FeatureSequence> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(single(video));
    let f = encode_video(&mut g, &p, shapes, x)?.sequence;
    to_sequence(&g, f, Modality::Video)
}

/// Project one feature sequence into the shared space.
pub fn project_sample(params: &ParamStore, f: &FeatureSequence) -> Result<FeatureSequence> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(single(&f.features));
    let y = project_embed(&mut g, &p, f.modality, x);
    let mut out = to_sequence(&g, y, f.modality)?;
    out.scale_level = f.scale_level;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;

    fn shapes() -> InputShapes {
        InputShapes::from_corpus(&CorpusConfig::default())
    }

    fn zero_final_layers(store: &mut ParamStore) {
        for name in ["audio.out.w", "audio.out.b", "video.tconv.w", "video.tconv.b"] {
            store
                .get_mut(name)
                .unwrap()
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn output_shapes_follow_config() {
        let cfg = EncoderConfig::default();
        let params = init_encoder_params(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::randn(&[64, 64], &mut rng);
        let v = Tensor::uniform(&[16, 32, 32, 3], 1.0, &mut rng);
        let fa = encode_audio_sample(&params, &shapes(), &a).unwrap();
        let fv = encode_video_sample(&params, &shapes(), &v).unwrap();
        assert_eq!(fa.features.shape(), &[16, 128]);
        assert_eq!(fv.features.shape(), &[16, 128]);
    }

    #[test]
    fn zero_final_layer_gives_zero_features() {
        let cfg = EncoderConfig::default();
        let mut params = init_encoder_params(&cfg, 1);
        zero_final_layers(&mut params);
        let fa = encode_audio_sample(&params, &shapes(), &Tensor::zeros(&[64, 64])).unwrap();
        let fv = encode_video_sample(&params, &shapes(), &Tensor::zeros(&[16, 32, 32, 3])).unwrap();
        assert!(fa.features.data().iter().all(|&v| v == 0.0));
        assert!(fv.features.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reversed_video_keeps_shape() {
        let cfg = EncoderConfig::default();
        let params = init_encoder_params(&cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = Tensor::uniform(&[16, 32, 32, 3], 1.0, &mut rng);
        let frames: Vec<Tensor> = (0..16).rev().map(|t| v.index0(t)).collect();
        let rev = Tensor::stack(&frames);
        let a = encode_video_sample(&params, &shapes(), &v).unwrap();
        let b = encode_video_sample(&params, &shapes(), &rev).unwrap();
        assert_eq!(a.features.shape(), b.features.shape());
    }

    /// Input frames visible from output step `t`, from the stride/kernel ladder.
    fn audio_receptive_field(t: usize, t_a: usize) -> (usize, usize) {
        let (mut lo, mut hi) = (t as isize, t as isize);
        for &(stride, _) in AUDIO_STRIDES.iter().rev() {
            lo = lo * stride as isize - 1;
            hi = hi * stride as isize + 1;
        }
        (lo.max(0) as usize, hi.min(t_a as isize - 1) as usize)
    }

    #[test]
    fn perturbation_reaches_only_covering_steps() {
        let cfg = EncoderConfig::default();
        let params = init_encoder_params(&cfg, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::randn(&[64, 64], &mut rng);
        let base = encode_audio_sample(&params, &shapes(), &a).unwrap();
        for j in [0, 5, 31, 63] {
            let mut b = a.clone();
            for f in 0..64 {
                b.data_mut()[j * 64 + f] += 1.0;
            }
            let pert = encode_audio_sample(&params, &shapes(), &b).unwrap();
            for t in 0..16 {
                let (lo, hi) = audio_receptive_field(t, 64);
                let changed = base.step(t) != pert.step(t);
                assert_eq!(changed, (lo..=hi).contains(&j), "frame {j}, step {t}");
            }
        }
    }

    #[test]
    fn projection_rows_are_unit_norm_and_identity_preserves_unit_rows() {
        let cfg = EncoderConfig::default();
        let mut params = init_encoder_params(&cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = FeatureSequence::new(Tensor::randn(&[16, 128], &mut rng), Modality::Audio, 1).unwrap();
        let y = project_sample(&params, &f).unwrap();
        for t in 0..16 {
            let n: f64 = y.step(t).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }

        let eye = Tensor::from_fn(&[128, 128], |i| if i / 128 == i % 128 { 1.0 } else { 0.0 });
        params.insert("audio.proj.w", eye);
        params.insert("audio.proj.b", Tensor::zeros(&[128]));
        let mut unit = Tensor::zeros(&[1, 128]);
        unit.data_mut()[0] = 0.6;
        unit.data_mut()[1] = 0.8;
        let f = FeatureSequence::new(unit.clone(), Modality::Audio, 1).unwrap();
        let y = project_sample(&params, &f).unwrap();
        assert!(y.features.max_abs_diff(&unit) < 1e-12);

        let zero = FeatureSequence::new(Tensor::zeros(&[2, 128]), Modality::Audio, 1).unwrap();
        assert!(project_sample(&params, &zero).unwrap().features.is_finite());
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fixed = Tensor::randn(&[2, 3, 6], &mut rng);
        let inputs = vec![
            Tensor::randn(&[2, 3, 6], &mut rng),
            Tensor::randn(&[6, 6], &mut rng),
            Tensor::randn(&[6], &mut rng),
        ];
        let report = check_gradients(
            |g, v| {
                let y = g.linear(v[0], v[1], v[2]);
                let y = g.l2_normalize(y, NORM_EPS);
                let c = g.constant(fixed.clone());
                let dot = g.mul(y, c);
                g.sum_all(dot)
            },
            &inputs,
            1e-5,
        );
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn shape_mismatch_is_an_input_error() {
        let params = init_encoder_params(&EncoderConfig::default(), 1);
        let err = encode_audio_sample(&params, &shapes(), &Tensor::zeros(&[32, 64]));
        assert!(matches!(err, Err(Error::Input(_))));
        let err = encode_video_sample(&params, &shapes(), &Tensor::zeros(&[16, 16, 32, 3]));
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn mismatched_reduction_is_a_config_error() {
        let s = InputShapes {
            audio_frames: 60,
            ..shapes()
        };
        assert!(matches!(EncoderConfig::default().validate(&s), Err(Error::Config(_))));
    }
}
