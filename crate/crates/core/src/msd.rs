//! Conditional denoising diffusion over log spectrograms.
//!
//! The denoiser is a three-stage convolutional encoder–decoder over the
//! `T_a × F_a` spectrogram. Every encoder stage adds a step embedding and is
//! modulated (FiLM) by one pyramid level resampled along the time axis,
//! with a separate scale and shift for every frequency column and channel;
//! stage `s` reads level `min(s, L)`, so the coarsest level drives the
//! deepest stage. Timesteps run `1..=T_d`; `alpha_bar(0) = 1`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    Ancestral,
    Deterministic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsdConfig {
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Weight of the terminal-step term.
    pub lambda_terminal: f64,
    pub channels: Vec<usize>,
    pub step_embed_dim: usize,
    /// Spectrograms are modelled as `(A - data_offset) / data_scale`.
    pub data_offset: f64,
    pub data_scale: f64,
    pub sampler: SamplerMode,
    pub sample_steps: usize,
}

impl Default for MsdConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            schedule: ScheduleKind::Linear,
            beta_start: 1e-3,
            beta_end: 0.2,
            lambda_terminal: 1.0,
            channels: vec![4, 8, 8],
            step_embed_dim: 32,
            data_offset: -2.0,
            data_scale: 1.0,
            sampler: SamplerMode::Deterministic,
            sample_steps: 50,
        }
    }
}

impl MsdConfig {
    pub fn validate(&self, audio_frames: usize, freq_bins: usize) -> Result<()> {
        if self.channels.len() != 3 || self.channels.contains(&0) {
            return Err(Error::Config("msd.channels needs three positive widths".into()));
        }
        if self.step_embed_dim == 0 || !self.step_embed_dim.is_multiple_of(2) {
            return Err(Error::Config("msd.step_embed_dim must be even and positive".into()));
        }
        if !audio_frames.is_multiple_of(8) || !freq_bins.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "denoiser needs spectrogram sides divisible by 8, got {audio_frames}×{freq_bins}"
            )));
        }
        if !(self.lambda_terminal >= 0.0 && self.lambda_terminal.is_finite()) {
            return Err(Error::Config("msd.lambda_terminal must be >= 0".into()));
        }
        if !(self.data_scale > 0.0 && self.data_offset.is_finite()) {
            return Err(Error::Config("msd.data_scale must be positive".into()));
        }
        if self.sample_steps == 0 || self.sample_steps > self.steps {
            return Err(Error::Config(format!(
                "msd.sample_steps must lie in 1..={}",
                self.steps
            )));
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.schedule, self.steps, self.beta_start, self.beta_end)
    }

    pub fn normalize(&self, a: &Tensor) -> Tensor {
        a.map(|v| (v - self.data_offset) / self.data_scale)
    }

    pub fn denormalize(&self, x: &Tensor) -> Tensor {
        x.map(|v| v * self.data_scale + self.data_offset)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// Cumulative product up to step `t` (`1..=T_d`); 1 at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

pub fn make_schedule(kind: ScheduleKind, steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("diffusion needs at least one step".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear if steps == 1 => vec![beta_start],
        ScheduleKind::Linear => (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect(),
        ScheduleKind::Cosine => {
            let s = 0.008;
            let f = |t: f64| {
                ((t / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
                    .cos()
                    .powi(2)
            };
            (1..=steps)
                .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(1e-12, 0.999))
                .collect()
        }
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        kind,
        betas,
        alphas,
        alpha_bars,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisyState {
    pub a_t: Tensor,
    pub t: usize,
    pub eps: Tensor,
}

/// `A_t = √ᾱ_t·A_0 + √(1−ᾱ_t)·ε`.
pub fn q_sample(a0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<NoisyState> {
    if t > schedule.steps() {
        return Err(Error::Argument(format!("step {t} outside 0..={}", schedule.steps())));
    }
    if a0.shape() != eps.shape() {
        return Err(Error::Input("noise and data shapes differ".into()));
    }
    let ab = schedule.alpha_bar(t);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(NoisyState {
        a_t: a0.zip_map(eps, |x, e| sa * x + sn * e),
        t,
        eps: eps.clone(),
    })
}

/// Sinusoidal embedding of one timestep: `[sin(t·ω_k), cos(t·ω_k)]`.
pub fn step_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        out[k] = (t as f64 * freq).sin();
        out[half + k] = (t as f64 * freq).cos();
    }
    out
}

fn conv_param(store: &mut ParamStore, name: &str, cin: usize, cout: usize, gain: f64, rng: &mut ChaCha8Rng) {
    store.insert(
        format!("{name}.w"),
        fan_in_uniform(&[3, 3, cin, cout], 9 * cin, gain, rng),
    );
    store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

fn linear_param(store: &mut ParamStore, name: &str, cin: usize, cout: usize, gain: f64, rng: &mut ChaCha8Rng) {
    store.insert(format!("{name}.w"), fan_in_uniform(&[cin, cout], cin, gain, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
}

/// Denoiser weights for conditioning features of width `cond_dim` and
/// spectrograms of `freq_bins` bins.
pub fn init_denoiser_params(cfg: &MsdConfig, cond_dim: usize, freq_bins: usize, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(30);
    let mut s = ParamStore::new();
    let c = &cfg.channels;
    let e = cfg.step_embed_dim;
    linear_param(&mut s, "msd.temb", e, e, 1.0, &mut rng);
    let ins = [1, c[0], c[1]];
    for i in 0..3 {
        conv_param(&mut s, &format!("msd.enc{}", i + 1), ins[i], c[i], 1.0, &mut rng);
        linear_param(&mut s, &format!("msd.temb{}", i + 1), e, c[i], 1.0, &mut rng);
        let cols = freq_bins >> (i + 1);
        linear_param(
            &mut s,
            &format!("msd.film{}.gamma", i + 1),
            cond_dim,
            cols * c[i],
            1.0,
            &mut rng,
        );
        linear_param(
            &mut s,
            &format!("msd.film{}.beta", i + 1),
            cond_dim,
            cols * c[i],
            1.0,
            &mut rng,
        );
    }
    conv_param(&mut s, "msd.mid", c[2], c[2], 1.0, &mut rng);
    conv_param(&mut s, "msd.dec3", c[2], c[1], 1.0, &mut rng);
    conv_param(&mut s, "msd.dec2", c[1], c[0], 1.0, &mut rng);
    conv_param(&mut s, "msd.out", c[0], 4, 1.0, &mut rng);
    s.insert("msd.head.w", Tensor::new(vec![2, 1], vec![1.0, 1.0]));
    s.insert("msd.head.b", Tensor::zeros(&[1]));
    s
}

fn conv(g: &mut Graph, p: &Bound, name: &str, x: Var, stride: usize) -> Var {
    g.conv2d(
        x,
        p.var(&format!("{name}.w")),
        p.var(&format!("{name}.b")),
        (stride, stride),
        (1, 1),
    )
}

fn lin(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Var {
    g.linear(x, p.var(&format!("{name}.w")), p.var(&format!("{name}.b")))
}

/// `ε̂ = ε_θ(x_t, t, cond)` for `x_t[B, T_a, F_a]` and one timestep per
/// sample. `cond` holds pyramid levels `[B, T_l, D]`; `None` runs the
/// unconditional network. `cond_levels` is the pyramid depth the model was
/// built for.
pub fn predict_noise(
    g: &mut Graph,
    p: &Bound,
    cfg: &MsdConfig,
    x_t: Var,
    t: &[usize],
    cond: Option<&[Var]>,
    cond_levels: usize,
) -> Result<Var> {
    let s = g.shape(x_t).to_vec();
    if s.len() != 3 || s[0] != t.len() {
        return Err(Error::Input(format!("denoiser input {s:?} with {} timesteps", t.len())));
    }
    if let Some(levels) = cond {
        if levels.len() != cond_levels {
            return Err(Error::Contract(format!(
                "denoiser expects {cond_levels} pyramid levels, got {}",
                levels.len()
            )));
        }
        for &l in levels {
            let ls = g.shape(l);
            if ls.len() != 3 || ls[0] != s[0] {
                return Err(Error::Contract(format!(
                    "pyramid level {ls:?} does not match batch {}",
                    s[0]
                )));
            }
        }
    }
    let (b, h, w) = (s[0], s[1], s[2]);
    let e = cfg.step_embed_dim;
    let emb: Vec<f64> = t.iter().flat_map(|&ti| step_embedding(ti, e)).collect();
    let emb = g.constant(Tensor::new(vec![b, e], emb));
    let emb = lin(g, p, "msd.temb", emb);
    let emb = g.silu(emb);

    let mut x = g.reshape(x_t, &[b, h, w, 1]);
    let mut skips = Vec::with_capacity(3);
    for stage in 1..=3 {
        x = conv(g, p, &format!("msd.enc{stage}"), x, 2);
        let te = lin(g, p, &format!("msd.temb{stage}"), emb);
        x = g.add_channel_bias(x, te);
        if let Some(levels) = cond {
            let level = levels[stage.min(levels.len()) - 1];
            let xs = g.shape(x).to_vec();
            let mut affine = |name: &str| {
                let v = lin(g, p, &format!("msd.film{stage}.{name}"), level);
                let v = g.resample_time(v, xs[1]);
                g.reshape(v, &xs)
            };
            let gamma = affine("gamma");
            let beta = affine("beta");
            x = g.film(x, gamma, beta);
        }
        x = g.silu(x);
        skips.push(x);
    }
    x = conv(g, p, "msd.mid", x, 1);
    x = g.silu(x);
    for (name, skip) in [("msd.dec3", skips[1]), ("msd.dec2", skips[0])] {
        x = g.upsample_nearest(x, 2, 2);
        x = conv(g, p, name, x, 1);
        x = g.add(x, skip);
        x = g.silu(x);
    }
    x = conv(g, p, "msd.out", x, 1);
    x = g.depth_to_space(x, 2);
    // The head sees √(1−ᾱ_t)·x_t, the best linear noise estimate for
    // unit-variance data, so the network only has to learn the residual.
    let schedule = cfg.schedule()?;
    let skip: Vec<f64> = t.iter().map(|&ti| (1.0 - schedule.alpha_bar(ti)).sqrt()).collect();
    let skip = g.constant(Tensor::from_fn(&[b, h, w, 1], |k| skip[k / (h * w)]));
    let x_in = g.reshape(x_t, &[b, h, w, 1]);
    let x_in = g.mul(x_in, skip);
    let x = g.concat_last(&[x, x_in]);
    let x = lin(g, p, "msd.head", x);
    Ok(g.reshape(x, &[b, h, w]))
}

/// Random quantities of one loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct MsdDraw {
    /// Timestep per sample, in `1..=T_d`.
    pub t: Vec<usize>,
    pub eps: Tensor,
    /// Noise for the terminal-step term.
    pub eps_terminal: Tensor,
}

impl MsdDraw {
    pub fn sample(shape: &[usize], steps: usize, rng: &mut ChaCha8Rng) -> Self {
        use rand::Rng;
        let t = (0..shape[0]).map(|_| rng.gen_range(1..=steps)).collect();
        Self {
            t,
            eps: Tensor::randn(shape, rng),
            eps_terminal: Tensor::randn(shape, rng),
        }
    }
}

pub struct MsdLoss {
    pub total: Var,
    pub term1: Var,
    /// Unweighted terminal-step term; `None` when it was not evaluated.
    pub term2: Option<Var>,
}

fn noised_batch(x0: &Tensor, t: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    let b = x0.shape()[0];
    let per = x0.numel() / b;
    let mut out = Vec::with_capacity(x0.numel());
    for i in 0..b {
        let a = Tensor::new(vec![per], x0.data()[i * per..(i + 1) * per].to_vec());
        let e = Tensor::new(vec![per], eps.data()[i * per..(i + 1) * per].to_vec());
        out.extend(q_sample(&a, t[i], &e, schedule)?.a_t.into_data());
    }
    Ok(Tensor::new(x0.shape().to_vec(), out))
}

/// `‖ε − ε̂(A_t, t)‖²` at a random step plus `λ_T·‖ε' − ε̂(A_T, T)‖²` at the
/// terminal step; both are means over elements. The terminal term is
/// skipped when `lambda_terminal` is zero or `terminal` is false.
#[allow(clippy::too_many_arguments)]
pub fn msd_loss(
    g: &mut Graph,
    p: &Bound,
    cfg: &MsdConfig,
    schedule: &NoiseSchedule,
    x0: &Tensor,
    cond: Option<&[Var]>,
    cond_levels: usize,
    draw: &MsdDraw,
    terminal: bool,
) -> Result<MsdLoss> {
    if x0.shape() != draw.eps.shape() || x0.shape() != draw.eps_terminal.shape() || draw.t.len() != x0.shape()[0] {
        return Err(Error::Input("draw does not match the data batch".into()));
    }
    let xt = g.constant(noised_batch(x0, &draw.t, &draw.eps, schedule)?);
    let pred = predict_noise(g, p, cfg, xt, &draw.t, cond, cond_levels)?;
    let eps = g.constant(draw.eps.clone());
    let term1 = g.mse(pred, eps);
    if !(terminal && cfg.lambda_terminal > 0.0) {
        return Ok(MsdLoss {
            total: term1,
            term1,
            term2: None,
        });
    }
    let big_t = vec![schedule.steps(); draw.t.len()];
    let xt = g.constant(noised_batch(x0, &big_t, &draw.eps_terminal, schedule)?);
    let pred = predict_noise(g, p, cfg, xt, &big_t, cond, cond_levels)?;
    let eps = g.constant(draw.eps_terminal.clone());
    let term2 = g.mse(pred, eps);
    let weighted = g.scale(term2, cfg.lambda_terminal);
    let total = g.add(term1, weighted);
    Ok(MsdLoss {
        total,
        term1,
        term2: Some(term2),
    })
}

/// Anything that predicts the noise in a batch `x_t[B, T_a, F_a]`.
pub trait NoisePredictor {
    fn predict(&self, x_t: &Tensor, t: &[usize]) -> Result<Tensor>;
}

/// The trained denoiser with fixed conditioning (batched pyramid levels).
pub struct Denoiser<'a> {
    pub params: &'a ParamStore,
    pub cfg: &'a MsdConfig,
    pub cond: Option<&'a [Tensor]>,
    pub cond_levels: usize,
}

impl NoisePredictor for Denoiser<'_> {
    fn predict(&self, x_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(x_t.clone());
        let cond: Option<Vec<Var>> = self.cond.map(|c| c.iter().map(|l| g.constant(l.clone())).collect());
        let y = predict_noise(&mut g, &p, self.cfg, x, t, cond.as_deref(), self.cond_levels)?;
        Ok(g.value(y).clone())
    }
}

/// `τ_i = i·T_d / S` for `i = 1..=S`.
pub fn strided_steps(total: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps == 0 || n_steps > total {
        return Err(Error::Argument(format!("sampling steps {n_steps} outside 1..={total}")));
    }
    Ok((1..=n_steps).map(|i| i * total / n_steps).collect())
}

/// Generate `seeds.len()` samples of shape `[T_a, F_a]` by running the
/// reverse chain from `T_d` to 0. Sample `i` draws all of its noise from
/// `seeds[i]`.
pub fn sample(
    model: &dyn NoisePredictor,
    sample_shape: [usize; 2],
    schedule: &NoiseSchedule,
    mode: SamplerMode,
    n_steps: usize,
    seeds: &[u64],
) -> Result<Tensor> {
    let taus = strided_steps(schedule.steps(), n_steps)?;
    let b = seeds.len();
    let per = sample_shape[0] * sample_shape[1];
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let mut x: Vec<f64> = Vec::with_capacity(b * per);
    for r in rngs.iter_mut() {
        x.extend((0..per).map(|_| -> f64 { StandardNormal.sample(r) }));
    }
    let shape = vec![b, sample_shape[0], sample_shape[1]];
    for i in (0..taus.len()).rev() {
        let t = taus[i];
        let t_prev = if i == 0 { 0 } else { taus[i - 1] };
        let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
        let eps = model.predict(&Tensor::new(shape.clone(), x.clone()), &vec![t; b])?;
        if !eps.is_finite() {
            return Err(Error::Numeric(format!("non-finite noise prediction at step {t}")));
        }
        let eps = eps.data();
        match mode {
            SamplerMode::Deterministic => {
                let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
                let (sa_p, sn_p) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
                for (xv, e) in x.iter_mut().zip(eps) {
                    let x0 = (*xv - sn * e) / sa;
                    *xv = sa_p * x0 + sn_p * e;
                }
            }
            SamplerMode::Ancestral => {
                let beta = 1.0 - ab / ab_prev;
                let coef = beta / (1.0 - ab).sqrt();
                let scale = 1.0 / (1.0 - beta).sqrt();
                let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
                for (k, (xv, e)) in x.iter_mut().zip(eps).enumerate() {
                    *xv = scale * (*xv - coef * e);
                    if t_prev > 0 {
                        let z: f64 = StandardNormal.sample(&mut rngs[k / per]);
                        *xv += sigma * z;
                    }
                }
            }
        }
    }
    let out = Tensor::new(shape, x);
    if !out.is_finite() {
        return Err(Error::Numeric("sampler produced non-finite values".into()));
    }
    Ok(out)
}
