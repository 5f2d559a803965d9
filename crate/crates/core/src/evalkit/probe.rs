use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::encoders::FeatureSequence;
use crate::error::{Error, Result};
use crate::ops::sigmoid;
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 400,
            learning_rate: 0.05,
            weight_decay: 1e-3,
        }
    }
}

/// Probe input for one (video, audio) pair: the dot product of the two
/// finest-level embeddings at every time step, followed by their mean.
pub fn alignment_features(video: &FeatureSequence, audio: &FeatureSequence) -> Result<Vec<f64>> {
    if video.features.shape() != audio.features.shape() {
        return Err(Error::Contract(format!(
            "probe needs equal shapes, got {:?} and {:?}",
            video.features.shape(),
            audio.features.shape()
        )));
    }
    let mut f: Vec<f64> = (0..video.len())
        .map(|t| video.step(t).iter().zip(audio.step(t)).map(|(a, b)| a * b).sum())
        .collect();
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    f.push(mean);
    Ok(f)
}

/// Standardised logistic regression: aligned vs misaligned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentProbe {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl AlignmentProbe {
    /// A probe that answers `aligned` for every input.
    pub fn constant(aligned: bool, dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
            weights: vec![0.0; dim],
            bias: if aligned { 1.0 } else { -1.0 },
        }
    }

    /// Full-batch Adam on the mean logistic loss plus `weight_decay·‖w‖²`.
    /// Starts from zero weights, so the result depends only on the data.
    pub fn train(features: &[Vec<f64>], labels: &[bool], cfg: &ProbeConfig) -> Result<Self> {
        let dim = check(features, labels)?;
        if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
            return Err(Error::Protocol("probe training needs both classes".into()));
        }
        let n = features.len();
        let mut mean = vec![0.0; dim];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v / n as f64;
            }
        }
        let mut scale = vec![0.0; dim];
        for f in features {
            for k in 0..dim {
                scale[k] += (f[k] - mean[k]).powi(2) / n as f64;
            }
        }
        scale.iter_mut().for_each(|s| *s = s.sqrt().max(1e-12));
        let x = Tensor::from_fn(&[n, dim], |i| {
            (features[i / dim][i % dim] - mean[i % dim]) / scale[i % dim]
        });
        let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();

        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[dim, 1]));
        store.insert("b", Tensor::zeros(&[1]));
        let mut adam = Adam::new(cfg.learning_rate);
        for _ in 0..cfg.iterations {
            let mut g = Graph::new();
            let p = store.bind(&mut g, true);
            let xv = g.constant(x.clone());
            let z = g.linear(xv, p.var("w"), p.var("b"));
            let z = g.reshape(z, &[n]);
            let loss = g.bce_with_logits(z, &y);
            let w2 = g.mul(p.var("w"), p.var("w"));
            let w2 = g.sum_all(w2);
            let reg = g.scale(w2, cfg.weight_decay);
            let total = g.add(loss, reg);
            let grads: BTreeMap<String, Tensor> = p.collect(&g, &g.backward(total));
            adam.step(&mut store, &grads);
        }
        if !store.is_finite() {
            return Err(Error::Numeric("probe weights diverged".into()));
        }
        Ok(Self {
            mean,
            scale,
            weights: store.get("w").unwrap().data().to_vec(),
            bias: store.get("b").unwrap().item(),
        })
    }

    pub fn logit(&self, f: &[f64]) -> f64 {
        self.bias
            + f.iter()
                .zip(&self.mean)
                .zip(&self.scale)
                .zip(&self.weights)
                .map(|(((v, m), s), w)| w * (v - m) / s)
                .sum::<f64>()
    }

    pub fn probability(&self, f: &[f64]) -> f64 {
        sigmoid(self.logit(f))
    }

    pub fn predict(&self, f: &[f64]) -> bool {
        self.logit(f) > 0.0
    }
}

fn check(features: &[Vec<f64>], labels: &[bool]) -> Result<usize> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::Input(format!(
            "{} feature rows for {} labels",
            features.len(),
            labels.len()
        )));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Input("probe feature rows differ in length".into()));
    }
    Ok(dim)
}

/// Percentage of correct aligned/misaligned decisions.
pub fn alignment_accuracy(probe: &AlignmentProbe, features: &[Vec<f64>], labels: &[bool]) -> Result<f64> {
    let dim = check(features, labels)?;
    if dim != probe.weights.len() {
        return Err(Error::Input(format!(
            "probe expects {} features, got {dim}",
            probe.weights.len()
        )));
    }
    if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
        return Err(Error::Protocol("alignment test set holds a single class".into()));
    }
    let correct = features
        .iter()
        .zip(labels)
        .filter(|(f, &l)| probe.predict(f) == l)
        .count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Modality;

    #[test]
    fn constant_probe_scores_half_on_a_balanced_set() {
        let f = vec![vec![0.1], vec![0.2], vec![0.3], vec![0.4]];
        let labels = [true, false, true, false];
        let p = AlignmentProbe::constant(true, 1);
        assert_eq!(alignment_accuracy(&p, &f, &labels).unwrap(), 50.0);
    }

    #[test]
    fn separable_toy_set_is_learned() {
        let u = [0.3, -1.2, 0.7];
        let mut f = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            f.push(u.iter().map(|v| s * v * (1.0 + 0.01 * i as f64)).collect::<Vec<_>>());
            labels.push(s > 0.0);
        }
        // Direct threshold oracle: the sign of f·u separates the classes.
        assert!(f
            .iter()
            .zip(&labels)
            .all(|(x, &l)| (x.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>() > 0.0) == l));
        let probe = AlignmentProbe::train(&f, &labels, &ProbeConfig::default()).unwrap();
        assert_eq!(alignment_accuracy(&probe, &f, &labels).unwrap(), 100.0);
    }

    #[test]
    fn single_class_sets_are_protocol_errors() {
        let f = vec![vec![0.1], vec![0.2]];
        let p = AlignmentProbe::constant(true, 1);
        assert!(matches!(
            alignment_accuracy(&p, &f, &[true, true]),
            Err(Error::Protocol(_))
        ));
        assert!(matches!(
            AlignmentProbe::train(&f, &[false, false], &ProbeConfig::default()),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn features_are_per_step_dots_then_mean() {
        let v = FeatureSequence::new(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]), Modality::Video, 1).unwrap();
        let a = FeatureSequence::new(Tensor::new(vec![2, 2], vec![0.5, 0.5, 1.0, 0.0]), Modality::Audio, 1).unwrap();
        assert_eq!(alignment_features(&v, &a).unwrap(), vec![0.5, 0.0, 0.25]);
    }
}
