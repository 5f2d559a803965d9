use std::collections::{BTreeMap, HashMap, HashSet};

use crate::encoders::Modality;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Unit-norm embeddings with unique integer ids.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub rows: Tensor,
    pub ids: Vec<u64>,
    pub modality: Modality,
}

impl EmbeddingTable {
    pub fn new(rows: Tensor, ids: Vec<u64>, modality: Modality) -> Result<Self> {
        if rows.ndim() != 2 || rows.shape()[0] != ids.len() {
            return Err(Error::Input(format!(
                "table rows {:?} do not match {} ids",
                rows.shape(),
                ids.len()
            )));
        }
        for i in 0..ids.len() {
            let n = rows.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Input(format!("row {i} has norm {n}, expected 1")));
            }
        }
        if ids.iter().collect::<HashSet<_>>().len() != ids.len() {
            return Err(Error::Input("embedding ids must be unique".into()));
        }
        Ok(Self { rows, ids, modality })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// 1-based rank of column `target` in `scores`: one plus the number of
/// entries that score higher, or tie and sit at a lower index.
pub fn rank_of_match(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < target))
        .count()
}

/// R@k in percent for a query×gallery score matrix where query `i`
/// matches gallery column `matches[i]`.
pub fn recall_from_scores(scores: &Tensor, matches: &[usize], ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    if scores.ndim() != 2 || scores.shape()[0] != matches.len() || matches.is_empty() {
        return Err(Error::Input(format!(
            "score matrix {:?} does not match {} queries",
            scores.shape(),
            matches.len()
        )));
    }
    let ng = scores.shape()[1];
    if let Some(&m) = matches.iter().find(|&&m| m >= ng) {
        return Err(Error::Protocol(format!("match index {m} outside gallery of {ng}")));
    }
    let ranks: Vec<usize> = matches
        .iter()
        .enumerate()
        .map(|(i, &m)| rank_of_match(scores.row(i), m))
        .collect();
    let n = matches.len() as f64;
    Ok(ks
        .iter()
        .map(|&k| (k, 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
        .collect())
}

/// Rank the gallery by cosine similarity for every query and report R@k.
pub fn recall_at_k(queries: &EmbeddingTable, gallery: &EmbeddingTable, ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    if queries.rows.shape()[1] != gallery.rows.shape()[1] {
        return Err(Error::Input("query and gallery widths differ".into()));
    }
    let index: HashMap<u64, usize> = gallery.ids.iter().enumerate().map(|(j, &id)| (id, j)).collect();
    let matches = queries
        .ids
        .iter()
        .map(|id| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| Error::Protocol(format!("query id {id} has no gallery match")))
        })
        .collect::<Result<Vec<_>>>()?;
    let (nq, ng) = (queries.len(), gallery.len());
    let scores = Tensor::from_fn(&[nq, ng], |k| {
        let (q, g) = (queries.rows.row(k / ng), gallery.rows.row(k % ng));
        q.iter().zip(g).map(|(a, b)| a * b).sum()
    });
    recall_from_scores(&scores, &matches, ks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_table(rows: Tensor, modality: Modality) -> EmbeddingTable {
        let d = rows.last_dim();
        let mut data = rows.into_data();
        for r in data.chunks_mut(d) {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter_mut().for_each(|v| *v /= n);
        }
        let n = data.len() / d;
        EmbeddingTable::new(Tensor::new(vec![n, d], data), (0..n as u64).collect(), modality).unwrap()
    }

    #[test]
    fn self_retrieval_is_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = unit_table(Tensor::randn(&[20, 6], &mut rng), Modality::Video);
        let r = recall_at_k(&t, &t, &[1, 5, 10]).unwrap();
        assert!(r.values().all(|&v| v == 100.0));
    }

    #[test]
    fn hand_enumerated_ranks() {
        // Matches on the diagonal ranked 1st, 2nd and 4th.
        let s = Tensor::new(
            vec![3, 4],
            vec![
                0.9, 0.1, 0.2, 0.3, //
                0.1, 0.5, 0.6, 0.0, //
                0.8, 0.7, 0.15, 0.2,
            ],
        );
        let r = recall_from_scores(&s, &[0, 1, 2], &[1, 5]).unwrap();
        assert!((r[&1] - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(r[&5], 100.0);
        assert_eq!(rank_of_match(s.row(2), 2), 4);
    }

    #[test]
    fn ties_break_toward_lower_gallery_index() {
        assert_eq!(rank_of_match(&[0.5, 0.5, 0.5], 0), 1);
        assert_eq!(rank_of_match(&[0.5, 0.5, 0.5], 2), 3);
    }

    #[test]
    fn missing_id_is_a_protocol_error() {
        let q = EmbeddingTable::new(Tensor::new(vec![1, 2], vec![1.0, 0.0]), vec![7], Modality::Audio).unwrap();
        let g = EmbeddingTable::new(Tensor::new(vec![1, 2], vec![1.0, 0.0]), vec![8], Modality::Video).unwrap();
        assert!(matches!(recall_at_k(&q, &g, &[1]), Err(Error::Protocol(_))));
    }

    #[test]
    fn table_invariants_are_checked() {
        assert!(EmbeddingTable::new(Tensor::new(vec![1, 2], vec![2.0, 0.0]), vec![1], Modality::Audio).is_err());
        let rows = Tensor::new(vec![2, 1], vec![1.0, 1.0]);
        assert!(EmbeddingTable::new(rows, vec![3, 3], Modality::Audio).is_err());
    }
}
