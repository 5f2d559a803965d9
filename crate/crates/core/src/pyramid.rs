//! Multi-scale feature sets built from single-scale embedding sequences.
//!
//! Level `l` mean-pools the input over windows of `factors[l]` steps, runs a
//! trainable depthwise temporal convolution (initialised to the identity)
//! and re-normalises every row. Level 1 is the finest.
//!
//! The optional spatial pyramid pools the video encoder's last spatial maps
//! over `s×s` grids, concatenates the cells of each frame into one feature
//! vector, projects it to `D` and adds it into level 1 of the video pyramid
//! before that level is re-normalised.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoders::{FeatureSequence, Modality, NORM_EPS};
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PyramidConfig {
    pub levels: usize,
    pub factors: Vec<usize>,
    /// Odd kernel width of the per-level temporal convolution.
    pub kernel: usize,
    pub spatial: bool,
    pub spatial_grids: Vec<usize>,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            factors: vec![1, 2, 4],
            kernel: 3,
            spatial: false,
            spatial_grids: vec![1, 2, 4],
        }
    }
}

impl PyramidConfig {
    /// Single-scale configuration.
    pub fn single() -> Self {
        Self {
            levels: 1,
            factors: vec![1],
            ..Self::default()
        }
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("pyramid.levels must be at least 1".into()));
        }
        if self.factors.len() != self.levels {
            return Err(Error::Config(format!(
                "pyramid.factors has {} entries for {} levels",
                self.factors.len(),
                self.levels
            )));
        }
        if self.factors[0] != 1 || self.factors.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "pyramid.factors must start at 1 and strictly increase".into(),
            ));
        }
        if let Some(&f) = self.factors.iter().find(|&&f| f > steps) {
            return Err(Error::Config(format!(
                "pyramid factor {f} exceeds the sequence length {steps}"
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config("pyramid.kernel must be odd".into()));
        }
        if self.spatial && (self.spatial_grids.is_empty() || self.spatial_grids.contains(&0)) {
            return Err(Error::Config(
                "pyramid.spatial_grids must be non-empty and positive".into(),
            ));
        }
        Ok(())
    }

    pub fn level_lengths(&self, steps: usize) -> Vec<usize> {
        self.factors.iter().map(|&f| steps.div_ceil(f)).collect()
    }
}

fn level_name(modality: Modality, level: usize) -> String {
    format!("pyramid.{modality}.l{level}")
}

/// Per-level convolutions (identity at init) and, if enabled, the spatial
/// projections from `map_channels·s²` to `dim`.
pub fn init_pyramid_params(cfg: &PyramidConfig, dim: usize, map_channels: usize, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    for m in [Modality::Audio, Modality::Video] {
        for l in 1..=cfg.levels {
            let name = level_name(m, l);
            let centre = cfg.kernel / 2;
            store.insert(
                format!("{name}.w"),
                Tensor::from_fn(&[cfg.kernel, dim], |i| if i / dim == centre { 1.0 } else { 0.0 }),
            );
            store.insert(format!("{name}.b"), Tensor::zeros(&[dim]));
        }
    }
    if cfg.spatial {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(20);
        for &s in &cfg.spatial_grids {
            let fan_in = s * s * map_channels;
            store.insert(
                format!("pyramid.spatial.s{s}.w"),
                fan_in_uniform(&[fan_in, dim], fan_in, 1.0, &mut rng),
            );
            store.insert(format!("pyramid.spatial.s{s}.b"), Tensor::zeros(&[dim]));
        }
    }
    store
}

/// Pre-normalisation level tensors `[B, ceil(T/f_l), D]`.
fn raw_levels(g: &mut Graph, p: &Bound, cfg: &PyramidConfig, modality: Modality, f: Var) -> Result<Vec<Var>> {
    let s = g.shape(f).to_vec();
    if s.len() != 3 {
        return Err(Error::Input(format!("pyramid input must be [B, T, D], got {s:?}")));
    }
    cfg.validate(s[1])?;
    Ok(cfg
        .factors
        .iter()
        .enumerate()
        .map(|(i, &factor)| {
            let pooled = if factor == 1 { f } else { g.temporal_pool(f, factor) };
            let name = level_name(modality, i + 1);
            g.depthwise_conv1d(pooled, p.var(&format!("{name}.w")), p.var(&format!("{name}.b")))
        })
        .collect())
}

/// Temporal pyramid of `f[B, T, D]`: one unit-row tensor per level.
pub fn temporal_pyramid(g: &mut Graph, p: &Bound, cfg: &PyramidConfig, modality: Modality, f: Var) -> Result<Vec<Var>> {
    let raw = raw_levels(g, p, cfg, modality, f)?;
    Ok(raw.into_iter().map(|x| g.l2_normalize(x, NORM_EPS)).collect())
}

/// Spatial grid features from `maps[B·T, h, w, C]`: one `[B, T, D]` unit-row
/// tensor per configured grid size.
pub fn spatial_pyramid(g: &mut Graph, p: &Bound, cfg: &PyramidConfig, maps: Var, batch: usize) -> Result<Vec<Var>> {
    let s = g.shape(maps).to_vec();
    if s.len() != 4 || batch == 0 || !s[0].is_multiple_of(batch) {
        return Err(Error::Input(format!(
            "spatial maps {s:?} do not split into {batch} clips"
        )));
    }
    let frames = s[0] / batch;
    Ok(cfg
        .spatial_grids
        .iter()
        .map(|&grid| {
            let cells = g.grid_pool(maps, grid);
            let name = format!("pyramid.spatial.s{grid}");
            let y = g.linear(cells, p.var(&format!("{name}.w")), p.var(&format!("{name}.b")));
            let d = g.shape(y)[1];
            let y = g.reshape(y, &[batch, frames, d]);
            g.l2_normalize(y, NORM_EPS)
        })
        .collect())
}

/// Video pyramid of projected embeddings `video[B, T_f, D]`, with the
/// spatial features merged into level 1 when enabled.
pub fn video_pyramid(
    g: &mut Graph,
    p: &Bound,
    cfg: &PyramidConfig,
    video: Var,
    spatial_maps: Option<Var>,
) -> Result<Vec<Var>> {
    let mut levels = raw_levels(g, p, cfg, Modality::Video, video)?;
    if cfg.spatial {
        let maps =
            spatial_maps.ok_or_else(|| Error::Contract("spatial pyramid enabled without spatial maps".into()))?;
        let batch = g.shape(video)[0];
        let mut finest = levels[0];
        for s in spatial_pyramid(g, p, cfg, maps, batch)? {
            if g.shape(s) != g.shape(finest) {
                return Err(Error::Contract(
                    "spatial features do not match the finest video level".into(),
                ));
            }
            finest = g.add(finest, s);
        }
        levels[0] = finest;
    }
    Ok(levels.into_iter().map(|x| g.l2_normalize(x, NORM_EPS)).collect())
}

/// Audio and video pyramids with matching level counts and lengths.
///
/// `audio` and `video` are projected embeddings `[B, T_f, D]`; `spatial_maps`
/// must be given when the spatial pyramid is enabled.
pub fn build_feature_pyramid(
    g: &mut Graph,
    p: &Bound,
    cfg: &PyramidConfig,
    audio: Var,
    video: Var,
    spatial_maps: Option<Var>,
) -> Result<(Vec<Var>, Vec<Var>)> {
    let (sa, sv) = (g.shape(audio).to_vec(), g.shape(video).to_vec());
    if sa != sv {
        return Err(Error::Contract(format!(
            "audio features {sa:?} and video features {sv:?} must share [B, T_f, D]"
        )));
    }
    let pa = temporal_pyramid(g, p, cfg, Modality::Audio, audio)?;
    let pv = video_pyramid(g, p, cfg, video, spatial_maps)?;
    Ok((pa, pv))
}

/// Per-sample pyramid, finest level first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureSequence>,
    pub modality: Modality,
}

impl FeaturePyramid {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn level(&self, l: usize) -> &FeatureSequence {
        &self.levels[l - 1]
    }

    /// Split batched level tensors `[B, T_l, D]` into per-sample pyramids.
    pub fn from_batch(levels: &[Tensor], modality: Modality) -> Result<Vec<FeaturePyramid>> {
        let b = levels.first().map(|t| t.shape()[0]).unwrap_or(0);
        (0..b)
            .map(|i| {
                let levels = levels
                    .iter()
                    .enumerate()
                    .map(|(l, t)| {
                        let mut fs = FeatureSequence::new(t.index0(i), modality, l + 1)?;
                        fs.scale_level = l + 1;
                        Ok(fs)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(FeaturePyramid { levels, modality })
            })
            .collect()
    }

    /// Stack per-sample pyramids back into `[B, T_l, D]` tensors.
    pub fn stack(pyramids: &[FeaturePyramid]) -> Result<Vec<Tensor>> {
        let first = pyramids
            .first()
            .ok_or_else(|| Error::Input("no pyramids to stack".into()))?;
        (0..first.len())
            .map(|l| {
                let rows: Vec<Tensor> = pyramids
                    .iter()
                    .map(|p| {
                        if p.len() != first.len() || p.levels[l].features.shape() != first.levels[l].features.shape() {
                            return Err(Error::Contract("pyramids differ in level shapes".into()));
                        }
                        Ok(p.levels[l].features.clone())
                    })
                    .collect::<Result<_>>()?;
                Ok(Tensor::stack(&rows))
            })
            .collect()
    }
}

/// Temporal pyramid of one projected sequence, without gradients.
pub fn temporal_pyramid_sample(
    params: &ParamStore,
    cfg: &PyramidConfig,
    f: &FeatureSequence,
) -> Result<FeaturePyramid> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(Tensor::stack(std::slice::from_ref(&f.features)));
    let levels = temporal_pyramid(&mut g, &p, cfg, f.modality, x)?;
    let values: Vec<Tensor> = levels.iter().map(|&v| g.value(v).clone()).collect();
    Ok(FeaturePyramid::from_batch(&values, f.modality)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand::SeedableRng;

    fn unit_rows(t: &Tensor) -> bool {
        t.data()
            .chunks(t.last_dim())
            .all(|r| (r.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6)
    }

    #[test]
    fn level_lengths_follow_ceil_division() {
        let cfg = PyramidConfig::default();
        assert_eq!(cfg.level_lengths(16), vec![16, 8, 4]);
        assert_eq!(cfg.level_lengths(7), vec![7, 4, 2]);
        let params = init_pyramid_params(&cfg, 4, 0, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = FeatureSequence::new(Tensor::randn(&[7, 4], &mut rng), Modality::Audio, 1).unwrap();
        let p = temporal_pyramid_sample(&params, &cfg, &f).unwrap();
        assert_eq!(
            p.levels.iter().map(FeatureSequence::len).collect::<Vec<_>>(),
            vec![7, 4, 2]
        );
        assert!(p.levels.iter().all(|l| unit_rows(&l.features)));
    }

    #[test]
    fn single_level_is_conv_then_normalize() {
        let cfg = PyramidConfig::single();
        let params = init_pyramid_params(&cfg, 3, 0, 0);
        let f = FeatureSequence::new(
            Tensor::new(vec![2, 3], vec![3.0, 0.0, 4.0, 0.0, 2.0, 0.0]),
            Modality::Video,
            1,
        )
        .unwrap();
        let p = temporal_pyramid_sample(&params, &cfg, &f).unwrap();
        assert_eq!(p.len(), 1);
        let expected = Tensor::new(vec![2, 3], vec![0.6, 0.0, 0.8, 0.0, 1.0, 0.0]);
        assert!(p.level(1).features.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn constant_input_gives_constant_levels() {
        let cfg = PyramidConfig::default();
        let mut params = init_pyramid_params(&cfg, 2, 0, 0);
        params.insert("pyramid.audio.l2.b", Tensor::new(vec![2], vec![0.5, -0.1]));
        let f = FeatureSequence::new(
            Tensor::from_fn(&[16, 2], |i| if i % 2 == 0 { 1.0 } else { 2.0 }),
            Modality::Audio,
            1,
        )
        .unwrap();
        let p = temporal_pyramid_sample(&params, &cfg, &f).unwrap();
        for level in &p.levels {
            for t in 1..level.len() {
                assert_eq!(level.step(t), level.step(0));
            }
        }
    }

    #[test]
    fn pooling_example_before_conv() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.temporal_pool(x, 2);
        assert_eq!(g.value(y).data(), &[1.5, 3.5]);
    }

    #[test]
    fn factor_beyond_length_is_a_config_error() {
        let cfg = PyramidConfig {
            levels: 2,
            factors: vec![1, 8],
            ..PyramidConfig::default()
        };
        assert!(matches!(cfg.validate(4), Err(Error::Config(_))));
        let bad = PyramidConfig {
            factors: vec![1, 4, 2],
            ..PyramidConfig::default()
        };
        assert!(matches!(bad.validate(16), Err(Error::Config(_))));
    }

    #[test]
    fn mismatched_steps_are_a_contract_error() {
        let cfg = PyramidConfig::default();
        let params = init_pyramid_params(&cfg, 4, 0, 0);
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let a = g.constant(Tensor::zeros(&[2, 16, 4]));
        let v = g.constant(Tensor::zeros(&[2, 8, 4]));
        assert!(matches!(
            build_feature_pyramid(&mut g, &p, &cfg, a, v, None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn audio_and_video_pyramids_zip() {
        let cfg = PyramidConfig::default();
        let params = init_pyramid_params(&cfg, 4, 0, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let a = g.constant(Tensor::randn(&[2, 16, 4], &mut rng));
        let v = g.constant(Tensor::randn(&[2, 16, 4], &mut rng));
        let (pa, pv) = build_feature_pyramid(&mut g, &p, &cfg, a, v, None).unwrap();
        assert_eq!(pa.len(), 3);
        for (x, y) in pa.iter().zip(&pv) {
            assert_eq!(g.shape(*x), g.shape(*y));
        }
        assert_eq!(g.shape(pa[2]), &[2, 4, 4]);
    }

    #[test]
    fn spatial_grid_one_is_global_pooling_and_pooling_is_local() {
        let mut g = Graph::new();
        let mut map = Tensor::zeros(&[1, 4, 4, 1]);
        map.data_mut()[4 + 1] = 8.0; // row 1, col 1: top-left quadrant
        let x = g.constant(map);
        let one = g.grid_pool(x, 1);
        assert_eq!(g.value(one).data(), &[0.5]);
        let two = g.grid_pool(x, 2);
        assert_eq!(g.value(two).data(), &[2.0, 0.0, 0.0, 0.0]);
        let c = g.constant(Tensor::full(&[1, 5, 3, 2], 1.5));
        let four = g.grid_pool(c, 4);
        assert!(g.value(four).data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn spatial_merge_changes_only_the_finest_video_level() {
        let cfg = PyramidConfig {
            spatial: true,
            ..PyramidConfig::default()
        };
        let params = init_pyramid_params(&cfg, 4, 3, 9);
        let plain = PyramidConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::randn(&[2, 8, 4], &mut rng);
        let v = Tensor::randn(&[2, 8, 4], &mut rng);
        let maps = Tensor::randn(&[16, 3, 3, 3], &mut rng);
        let run = |cfg: &PyramidConfig| {
            let mut g = Graph::new();
            let p = params.bind(&mut g, false);
            let (av, vv, mv) = (g.constant(a.clone()), g.constant(v.clone()), g.constant(maps.clone()));
            let (pa, pv) = build_feature_pyramid(&mut g, &p, cfg, av, vv, Some(mv)).unwrap();
            let get = |xs: &[Var]| xs.iter().map(|&x| g.value(x).clone()).collect::<Vec<_>>();
            (get(&pa), get(&pv))
        };
        let (a1, v1) = run(&cfg);
        let (a0, v0) = run(&plain);
        assert_eq!(a1, a0);
        assert!(v1[0].max_abs_diff(&v0[0]) > 1e-3);
        assert_eq!(v1[1..], v0[1..]);
        assert!(unit_rows(&v1[0]));
    }

    #[test]
    fn pyramid_gradients_match_finite_differences() {
        let cfg = PyramidConfig {
            spatial: true,
            spatial_grids: vec![1, 2],
            ..PyramidConfig::default()
        };
        let store = init_pyramid_params(&cfg, 3, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let names: Vec<String> = store.iter().map(|(k, _)| k.clone()).collect();
        let mut inputs = vec![
            Tensor::randn(&[2, 5, 3], &mut rng),
            Tensor::randn(&[2, 5, 3], &mut rng),
            Tensor::randn(&[10, 3, 3, 2], &mut rng),
        ];
        inputs.extend(
            store
                .iter()
                .map(|(_, t)| t.zip_map(&Tensor::randn(t.shape(), &mut rng), |a, b| a + 0.3 * b)),
        );
        let weights = Tensor::randn(&[2, 5, 3], &mut rng);
        let report = check_gradients(
            |g, v| {
                let bound = Bound::from_vars(names.iter().cloned().zip(v[3..].iter().copied()));
                let (pa, pv) = build_feature_pyramid(g, &bound, &cfg, v[0], v[1], Some(v[2])).unwrap();
                let w = g.constant(weights.clone());
                let mut total = {
                    let m = g.mul(pv[0], w);
                    g.sum_all(m)
                };
                for x in pa.iter().chain(&pv[1..]) {
                    let q = g.mul(*x, *x);
                    let q = g.tanh(q);
                    let s = g.sum_all(q);
                    total = g.add(total, s);
                }
                let q = g.mul(pa[1], pa[1]);
                let s = g.mean_all(q);
                g.add(total, s)
            },
            &inputs,
            1e-5,
        );
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}
