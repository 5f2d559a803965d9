use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Cut-offs reported for retrieval.
pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Metrics of one run. Missing entries were not evaluated.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_fingerprint: String,
    pub retrieval_samples: usize,
    pub generation_samples: usize,
    /// Video query, audio gallery.
    pub recall_v2a: BTreeMap<usize, f64>,
    pub recall_a2v: BTreeMap<usize, f64>,
    pub align_acc: Option<f64>,
    pub kld: Option<f64>,
    pub fad: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl EvalReport {
    pub fn csv_header() -> String {
        let mut cols = vec![
            "config_fingerprint".to_string(),
            "retrieval_samples".into(),
            "generation_samples".into(),
        ];
        for dir in ["v2a", "a2v"] {
            for k in RECALL_KS {
                cols.push(format!("{dir}_r{k}"));
            }
        }
        cols.extend(["align_acc".into(), "kld".into(), "fad".into()]);
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.config_fingerprint.clone(),
            self.retrieval_samples.to_string(),
            self.generation_samples.to_string(),
        ];
        for map in [&self.recall_v2a, &self.recall_a2v] {
            for k in RECALL_KS {
                cols.push(opt(map.get(&k).copied()));
            }
        }
        cols.extend([opt(self.align_acc), opt(self.kld), opt(self.fad)]);
        cols.join(",")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_row_have_equal_width() {
        let mut r = EvalReport {
            config_fingerprint: "abc".into(),
            kld: Some(0.5),
            ..EvalReport::default()
        };
        r.recall_v2a.insert(1, 12.5);
        let h = EvalReport::csv_header();
        let row = r.csv_row();
        assert_eq!(h.split(',').count(), row.split(',').count());
        assert!(row.starts_with("abc,0,0,12.500000,,,"));
        assert!(row.ends_with(",0.500000,"));
    }
}
