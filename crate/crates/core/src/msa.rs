//! Multi-scale contrastive alignment between audio and video pyramids.
//!
//! Each level contributes a symmetric InfoNCE term over a `B×B` cosine
//! similarity matrix between time-pooled audio and video embeddings. With
//! attention enabled the finest level pools each (audio `i`, video `j`)
//! pair with its own softmax weights `w_t ∝ exp(a_{i,t}·v_{j,t})`, so a
//! score never depends on which video is the true partner of audio `i`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoders::{FeatureSequence, NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Weighted temporal average of the finest-level features.
    Features,
    /// Per-step InfoNCE terms at the finest level, weighted per anchor.
    LossTerms,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsaConfig {
    pub temperature: f64,
    pub use_attention: bool,
    pub attention_mode: AttentionMode,
}

impl Default for MsaConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            use_attention: true,
            attention_mode: AttentionMode::Features,
        }
    }
}

impl MsaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config("msa.temperature must be positive".into()));
        }
        Ok(())
    }

    fn pairwise_attention(&self) -> bool {
        self.use_attention && self.attention_mode == AttentionMode::Features
    }
}

fn softmax_in_place(x: &mut [f64]) {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in x.iter_mut() {
        *v = (*v - mx).exp();
        z += *v;
    }
    x.iter_mut().for_each(|v| *v /= z);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (a, b) in y.iter_mut().zip(x) {
        *a += alpha * b;
    }
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `S[i,j] = cos(a_i, v_j)` for `a, v: [B, D]` with ε-stabilised norms.
pub fn cosine_similarity_matrix(g: &mut Graph, a: Var, v: Var) -> Var {
    let an = g.l2_normalize(a, NORM_EPS);
    let vn = g.l2_normalize(v, NORM_EPS);
    g.matmul_nt(an, vn)
}

/// Symmetric InfoNCE over `s[B,B]` (rows: audio anchors, columns: video
/// anchors) with the uniform per-anchor weight `1/B`.
pub fn info_nce_loss(g: &mut Graph, s: Var, tau: f64) -> Result<Var> {
    info_nce_core(g, s, tau, None)
}

/// Symmetric InfoNCE where anchor `i` (audio row `i` and video column `i`)
/// is weighted by `weights[i]` instead of `1/B`. Differentiable in both.
pub fn info_nce_weighted(g: &mut Graph, s: Var, tau: f64, weights: Var) -> Result<Var> {
    info_nce_core(g, s, tau, Some(weights))
}

fn info_nce_core(g: &mut Graph, s: Var, tau: f64, weights: Option<Var>) -> Result<Var> {
    let shape = g.shape(s).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] || shape[0] < 1 {
        return Err(Error::Input(format!("similarity matrix must be square, got {shape:?}")));
    }
    if !(tau > 0.0) {
        return Err(Error::Argument("temperature must be positive".into()));
    }
    let b = shape[0];
    let sv = g.value(s).data();
    if !sv.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("similarity matrix holds non-finite entries".into()));
    }
    let omega: Vec<f64> = match weights {
        Some(w) if g.shape(w) == [b] => g.value(w).data().to_vec(),
        Some(w) => return Err(Error::Input(format!("anchor weights {:?} for batch {b}", g.shape(w)))),
        None => vec![1.0 / b as f64; b],
    };
    let mut row_p = vec![0.0; b * b];
    let mut col_p = vec![0.0; b * b];
    let mut anchor_ce = vec![0.0; b];
    let lse = |x: &[f64]| {
        let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        mx + x.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
    };
    let mut loss = 0.0;
    for i in 0..b {
        let mut r: Vec<f64> = (0..b).map(|j| sv[i * b + j] / tau).collect();
        let mut c: Vec<f64> = (0..b).map(|j| sv[j * b + i] / tau).collect();
        anchor_ce[i] = 0.5 * ((lse(&r) - r[i]) + (lse(&c) - c[i]));
        loss += omega[i] * anchor_ce[i];
        softmax_in_place(&mut r);
        softmax_in_place(&mut c);
        for j in 0..b {
            row_p[i * b + j] = r[j];
            col_p[j * b + i] = c[j];
        }
    }
    let inputs: Vec<Var> = std::iter::once(s).chain(weights).collect();
    Ok(g.custom(
        &inputs,
        Tensor::scalar(loss),
        Box::new(move |ctx| {
            let gl = ctx.grad.item();
            let k = gl * 0.5 / tau;
            let mut d = vec![0.0; b * b];
            for i in 0..b {
                for j in 0..b {
                    let delta = if i == j { 1.0 } else { 0.0 };
                    d[i * b + j] = k * (omega[i] * (row_p[i * b + j] - delta) + omega[j] * (col_p[i * b + j] - delta));
                }
            }
            let mut out = vec![Some(Tensor::new(vec![b, b], d))];
            if ctx.inputs.len() == 2 {
                out.push(Some(Tensor::new(vec![b], anchor_ce.iter().map(|c| gl * c).collect())));
            }
            out
        }),
    ))
}

/// Pairwise attention-pooled cosine similarity of `a, v: [B, T, D]`:
/// `S[i,j] = cos(Σ_t w_t a_{i,t}, Σ_t w_t v_{j,t})` with
/// `w = softmax_t(a_{i,t}·v_{j,t})` computed per pair.
pub fn attention_similarity_matrix(g: &mut Graph, a: Var, v: Var) -> Result<Var> {
    let (sa, sv) = (g.shape(a).to_vec(), g.shape(v).to_vec());
    if sa.len() != 3 || sa[1..] != sv[1..] || sv.len() != 3 {
        return Err(Error::Contract(format!(
            "attention inputs {sa:?} and {sv:?} do not share [T, D]"
        )));
    }
    let (ba, bv, t, d) = (sa[0], sv[0], sa[1], sa[2]);
    let (av, vv) = (g.value(a).data(), g.value(v).data());
    let mut out = vec![0.0; ba * bv];
    let mut cache = Vec::with_capacity(ba * bv);
    for i in 0..ba {
        for j in 0..bv {
            let f = pair_forward(&av[i * t * d..][..t * d], &vv[j * t * d..][..t * d], t, d);
            out[i * bv + j] = f.s;
            cache.push(f);
        }
    }
    Ok(g.custom(
        &[a, v],
        Tensor::new(vec![ba, bv], out),
        Box::new(move |ctx| {
            let (av, vv, gs) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let mut da = vec![0.0; ba * t * d];
            let mut dv = vec![0.0; bv * t * d];
            for i in 0..ba {
                for j in 0..bv {
                    let gij = gs[i * bv + j];
                    if gij == 0.0 {
                        continue;
                    }
                    let ai = &av[i * t * d..][..t * d];
                    let vj = &vv[j * t * d..][..t * d];
                    let f = &cache[i * bv + j];
                    let (np, nq) = (norm(&f.p), norm(&f.q));
                    let (sp, sq) = (np.max(NORM_EPS), nq.max(NORM_EPS));
                    let gp: Vec<f64> = (0..d)
                        .map(|k| f.q[k] / (sp * sq) - if np > NORM_EPS { f.s * f.p[k] / (np * sp) } else { 0.0 })
                        .collect();
                    let gq: Vec<f64> = (0..d)
                        .map(|k| f.p[k] / (sp * sq) - if nq > NORM_EPS { f.s * f.q[k] / (nq * sq) } else { 0.0 })
                        .collect();
                    let c: Vec<f64> = (0..t)
                        .map(|s| dot(&gp, &ai[s * d..][..d]) + dot(&gq, &vj[s * d..][..d]))
                        .collect();
                    let cbar = dot(&f.w, &c);
                    let dai = &mut da[i * t * d..][..t * d];
                    for s in 0..t {
                        let dl = gij * f.w[s] * (c[s] - cbar);
                        axpy(&mut dai[s * d..][..d], gij * f.w[s], &gp);
                        axpy(&mut dai[s * d..][..d], dl, &vj[s * d..][..d]);
                    }
                    let dvj = &mut dv[j * t * d..][..t * d];
                    for s in 0..t {
                        let dl = gij * f.w[s] * (c[s] - cbar);
                        axpy(&mut dvj[s * d..][..d], gij * f.w[s], &gq);
                        axpy(&mut dvj[s * d..][..d], dl, &ai[s * d..][..d]);
                    }
                }
            }
            vec![
                Some(Tensor::new(vec![ba, t, d], da)),
                Some(Tensor::new(vec![bv, t, d], dv)),
            ]
        }),
    ))
}

struct PairForward {
    w: Vec<f64>,
    p: Vec<f64>,
    q: Vec<f64>,
    s: f64,
}

fn pair_forward(a: &[f64], v: &[f64], t: usize, d: usize) -> PairForward {
    let mut w: Vec<f64> = (0..t).map(|s| dot(&a[s * d..][..d], &v[s * d..][..d])).collect();
    softmax_in_place(&mut w);
    let mut p = vec![0.0; d];
    let mut q = vec![0.0; d];
    for s in 0..t {
        axpy(&mut p, w[s], &a[s * d..][..d]);
        axpy(&mut q, w[s], &v[s * d..][..d]);
    }
    let s = dot(&p, &q) / (norm(&p).max(NORM_EPS) * norm(&q).max(NORM_EPS));
    PairForward { w, p, q, s }
}

/// Per-level `B_a×B_v` similarity matrices used for both training and retrieval.
pub fn level_similarities(g: &mut Graph, audio: &[Var], video: &[Var], cfg: &MsaConfig) -> Result<Vec<Var>> {
    check_zip(g, audio, video)?;
    audio
        .iter()
        .zip(video)
        .enumerate()
        .map(|(l, (&a, &v))| {
            if l == 0 && cfg.pairwise_attention() {
                attention_similarity_matrix(g, a, v)
            } else {
                let am = g.mean_axis(a, 1);
                let vm = g.mean_axis(v, 1);
                Ok(cosine_similarity_matrix(g, am, vm))
            }
        })
        .collect()
}

fn check_zip(g: &Graph, audio: &[Var], video: &[Var]) -> Result<()> {
    if audio.is_empty() || audio.len() != video.len() {
        return Err(Error::Contract(format!(
            "pyramids have {} audio and {} video levels",
            audio.len(),
            video.len()
        )));
    }
    for (l, (&a, &v)) in audio.iter().zip(video).enumerate() {
        let (sa, sv) = (g.shape(a), g.shape(v));
        if sa.len() != 3 || sv.len() != 3 || sa[1..] != sv[1..] {
            return Err(Error::Contract(format!(
                "level {} shapes {sa:?} and {sv:?} differ",
                l + 1
            )));
        }
    }
    Ok(())
}

pub struct MsaLoss {
    pub total: Var,
    /// One term per level, finest first; `total` is their sum in this order.
    pub per_scale: Vec<Var>,
}

/// Sum over levels of the symmetric InfoNCE loss.
pub fn msa_loss(g: &mut Graph, audio: &[Var], video: &[Var], cfg: &MsaConfig) -> Result<MsaLoss> {
    cfg.validate()?;
    let sims = level_similarities(g, audio, video, cfg)?;
    let b = g.shape(audio[0])[0];
    if g.shape(video[0])[0] != b {
        return Err(Error::Contract("audio and video batches differ in size".into()));
    }
    if b < 2 {
        return Err(Error::Input("contrastive loss needs a batch of at least 2".into()));
    }
    let mut per_scale = Vec::with_capacity(sims.len());
    for (l, &s) in sims.iter().enumerate() {
        let term = if l == 0 && cfg.use_attention && cfg.attention_mode == AttentionMode::LossTerms {
            loss_term_attention(g, audio[0], video[0], cfg.temperature)?
        } else {
            info_nce_loss(g, s, cfg.temperature)?
        };
        per_scale.push(term);
    }
    let mut total = per_scale[0];
    for &t in &per_scale[1..] {
        total = g.add(total, t);
    }
    Ok(MsaLoss { total, per_scale })
}

/// `Σ_t InfoNCE(S_t)` with anchor `i` weighted by `w_{i,t} / B`, where
/// `w_i = softmax_t(a_{i,t}·v_{i,t})` for the aligned pair.
fn loss_term_attention(g: &mut Graph, a: Var, v: Var, tau: f64) -> Result<Var> {
    let s = g.shape(a).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let prod = g.mul(a, v);
    let logits = g.mean_axis(prod, 2);
    let logits = g.scale(logits, d as f64);
    let w = g.softmax_last(logits);
    let w = g.scale(w, 1.0 / b as f64);
    let w = g.reshape(w, &[b, t, 1]);
    let mut total: Option<Var> = None;
    for step in 0..t {
        let at = g.select_step(a, step);
        let vt = g.select_step(v, step);
        let st = cosine_similarity_matrix(g, at, vt);
        let omega = g.select_step(w, step);
        let omega = g.reshape(omega, &[b]);
        let term = info_nce_weighted(g, st, tau, omega)?;
        total = Some(match total {
            Some(acc) => g.add(acc, term),
            None => term,
        });
    }
    Ok(total.expect("at least one time step"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Tensor,
    pub scale_level: usize,
    pub temperature: f64,
}

/// Cosine similarities between pooled audio (`[B, D]`) and video embeddings.
pub fn similarity_matrix(
    audio: &Tensor,
    video: &Tensor,
    scale_level: usize,
    temperature: f64,
) -> Result<SimilarityMatrix> {
    if audio.ndim() != 2 || audio.shape() != video.shape() {
        return Err(Error::Input(format!(
            "pooled embeddings must share [B, D], got {:?} and {:?}",
            audio.shape(),
            video.shape()
        )));
    }
    if audio.shape()[0] < 2 {
        return Err(Error::Input("similarity matrix needs a batch of at least 2".into()));
    }
    let mut g = Graph::new();
    let (a, v) = (g.constant(audio.clone()), g.constant(video.clone()));
    let s = cosine_similarity_matrix(&mut g, a, v);
    Ok(SimilarityMatrix {
        values: g.value(s).clone(),
        scale_level,
        temperature,
    })
}

/// Symmetric InfoNCE value of a similarity matrix.
pub fn info_nce(s: &SimilarityMatrix) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(s.values.clone());
    let l = info_nce_loss(&mut g, v, s.temperature)?;
    Ok(g.value(l).item())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub weights: Vec<f64>,
}

/// `softmax_t(F^v_t · F^a_t)` for one aligned pair.
pub fn temporal_attention_weights(video: &FeatureSequence, audio: &FeatureSequence) -> Result<AttentionWeights> {
    if video.features.shape() != audio.features.shape() {
        return Err(Error::Contract(format!(
            "attention needs equal shapes, got {:?} and {:?}",
            video.features.shape(),
            audio.features.shape()
        )));
    }
    let (t, d) = (video.len(), video.dim());
    let f = pair_forward(audio.features.data(), video.features.data(), t, d);
    Ok(AttentionWeights { weights: f.w })
}

/// Retrieval scores between every audio and every video sample: the mean of
/// the per-level similarity matrices. Levels are `[N, T_l, D]` tensors.
pub fn similarity_scores(audio: &[Tensor], video: &[Tensor], cfg: &MsaConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let a: Vec<Var> = audio.iter().map(|t| g.constant(t.clone())).collect();
    let v: Vec<Var> = video.iter().map(|t| g.constant(t.clone())).collect();
    let sims = level_similarities(&mut g, &a, &v, cfg)?;
    let mut out = Tensor::zeros(g.shape(sims[0]));
    for s in &sims {
        out.add_assign(g.value(*s));
    }
    Ok(out.scale(1.0 / sims.len() as f64))
}
