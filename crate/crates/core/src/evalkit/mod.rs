//! Evaluation metrics: retrieval recall, the alignment probe, KL divergence
//! between class distributions, Fréchet distance, and the fixed audio
//! classifier whose features and probabilities feed FAD and KLD.

mod classifier;
mod frechet;
mod kld;
mod probe;
mod report;
mod retrieval;

pub use classifier::{AudioClassifier, ClassifierConfig};
pub use frechet::{fit_gaussian, frechet_distance, GaussianStats};
pub use kld::{kl_divergence, kld_metric, PROB_FLOOR};
pub use probe::{alignment_accuracy, alignment_features, AlignmentProbe, ProbeConfig};
pub use report::{EvalReport, RECALL_KS};
pub use retrieval::{rank_of_match, recall_at_k, recall_from_scores, EmbeddingTable};
