use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::{fan_in_uniform, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub hidden: usize,
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            iterations: 300,
            learning_rate: 0.01,
        }
    }
}

/// Fixed evaluator over spectrograms: per-frequency time mean and standard
/// deviation, one tanh hidden layer, softmax over classes. The hidden
/// activations are the feature space for Fréchet distance; the class
/// probabilities feed the KL metric.
#[derive(Clone, Debug)]
pub struct AudioClassifier {
    mean: Vec<f64>,
    scale: Vec<f64>,
    params: ParamStore,
    classes: usize,
}

fn summary(spec: &Tensor) -> Vec<f64> {
    let (t, f) = (spec.shape()[0], spec.shape()[1]);
    let mut out = vec![0.0; 2 * f];
    for k in 0..f {
        let m = (0..t).map(|i| spec.data()[i * f + k]).sum::<f64>() / t as f64;
        let v = (0..t).map(|i| (spec.data()[i * f + k] - m).powi(2)).sum::<f64>() / t as f64;
        out[k] = m;
        out[f + k] = v.sqrt();
    }
    out
}

impl AudioClassifier {
    pub fn train(
        spectrograms: &[Tensor],
        labels: &[usize],
        classes: usize,
        cfg: &ClassifierConfig,
        seed: u64,
    ) -> Result<Self> {
        if spectrograms.is_empty() || spectrograms.len() != labels.len() {
            return Err(Error::Input("classifier needs one label per spectrogram".into()));
        }
        if labels.iter().any(|&l| l >= classes) {
            return Err(Error::Input(format!("labels must lie below {classes}")));
        }
        let rows: Vec<Vec<f64>> = spectrograms.iter().map(summary).collect();
        let (n, dim) = (rows.len(), rows[0].len());
        let mut mean = vec![0.0; dim];
        let mut scale = vec![0.0; dim];
        for r in &rows {
            for k in 0..dim {
                mean[k] += r[k] / n as f64;
            }
        }
        for r in &rows {
            for k in 0..dim {
                scale[k] += (r[k] - mean[k]).powi(2) / n as f64;
            }
        }
        scale.iter_mut().for_each(|s| *s = s.sqrt().max(1e-6));

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(40);
        let mut params = ParamStore::new();
        params.insert("h.w", fan_in_uniform(&[dim, cfg.hidden], dim, 1.0, &mut rng));
        params.insert("h.b", Tensor::zeros(&[cfg.hidden]));
        params.insert("o.w", fan_in_uniform(&[cfg.hidden, classes], cfg.hidden, 1.0, &mut rng));
        params.insert("o.b", Tensor::zeros(&[classes]));
        let mut clf = Self {
            mean,
            scale,
            params,
            classes,
        };
        let x = clf.standardize(&rows);
        let mut adam = Adam::new(cfg.learning_rate);
        for _ in 0..cfg.iterations {
            let mut g = Graph::new();
            let p = clf.params.bind(&mut g, true);
            let xv = g.constant(x.clone());
            let h = g.linear(xv, p.var("h.w"), p.var("h.b"));
            let h = g.tanh(h);
            let z = g.linear(h, p.var("o.w"), p.var("o.b"));
            let loss = g.cross_entropy(z, labels);
            let grads: BTreeMap<String, Tensor> = p.collect(&g, &g.backward(loss));
            adam.step(&mut clf.params, &grads);
        }
        if !clf.params.is_finite() {
            return Err(Error::Numeric("audio classifier diverged".into()));
        }
        Ok(clf)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn standardize(&self, rows: &[Vec<f64>]) -> Tensor {
        let dim = self.mean.len();
        Tensor::from_fn(&[rows.len(), dim], |i| {
            (rows[i / dim][i % dim] - self.mean[i % dim]) / self.scale[i % dim]
        })
    }

    fn forward(&self, spectrograms: &[Tensor]) -> (Tensor, Tensor) {
        let rows: Vec<Vec<f64>> = spectrograms.iter().map(summary).collect();
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(self.standardize(&rows));
        let h = g.linear(x, p.var("h.w"), p.var("h.b"));
        let h = g.tanh(h);
        let z = g.linear(h, p.var("o.w"), p.var("o.b"));
        (g.value(h).clone(), g.value(z).clone())
    }

    /// Hidden-layer features, `[N, hidden]`.
    pub fn features(&self, spectrograms: &[Tensor]) -> Tensor {
        self.forward(spectrograms).0
    }

    pub fn probabilities(&self, spectrograms: &[Tensor]) -> Vec<Vec<f64>> {
        let z = self.forward(spectrograms).1;
        (0..spectrograms.len())
            .map(|i| {
                let r = z.row(i);
                let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = r.iter().map(|v| (v - mx).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            })
            .collect()
    }

    /// Top-1 accuracy in percent.
    pub fn accuracy(&self, spectrograms: &[Tensor], labels: &[usize]) -> f64 {
        let probs = self.probabilities(spectrograms);
        let correct = probs
            .iter()
            .zip(labels)
            .filter(|(p, &l)| (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])) == Some(l))
            .count();
        100.0 * correct as f64 / labels.len().max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthpair::{generate_pair, CorpusConfig};

    #[test]
    fn summary_is_time_mean_and_std() {
        let s = Tensor::new(vec![2, 2], vec![1.0, 0.0, 3.0, 0.0]);
        assert_eq!(summary(&s), vec![2.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn learns_corpus_classes() {
        let cfg = CorpusConfig::default();
        let pairs: Vec<_> = (0..160).map(|i| generate_pair(&cfg, 1000 + i).unwrap()).collect();
        let specs: Vec<Tensor> = pairs.iter().map(|p| p.audio.clone()).collect();
        let labels: Vec<usize> = pairs.iter().map(|p| p.truth.class_id).collect();
        let clf = AudioClassifier::train(
            &specs[..120],
            &labels[..120],
            cfg.classes,
            &ClassifierConfig::default(),
            5,
        )
        .unwrap();
        assert!(clf.accuracy(&specs[120..], &labels[120..]) > 80.0);
        let p = clf.probabilities(&specs[..3]);
        assert!(p.iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-12));
        assert_eq!(clf.features(&specs[..3]).shape(), &[3, 32]);
    }
}
