//! Concept recovery against the latent ground truth.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{bool_column, column, hungarian_max, roc_auc_sorted};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptMatch {
    pub latent: usize,
    pub head: usize,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptRecovery {
    /// `auc[h][c]`: AUC of head `h`'s score for latent concept `c`.
    pub auc: Vec<Vec<f64>>,
    pub matching: Vec<ConceptMatch>,
    pub mean_matched_auc: f64,
    /// Mean matched AUC after shuffling the latent labels across samples.
    pub null_mean: f64,
    pub null_std: f64,
    pub null_samples: Vec<f64>,
}

/// AUC of every head column of `scores` against every latent column.
/// Latents without both values score 0.5.
pub fn auc_matrix(scores: &Tensor, latents: &Tensor) -> Vec<Vec<f64>> {
    let cols: Vec<Vec<bool>> = (0..latents.cols()).map(|c| bool_column(latents, c)).collect();
    auc_matrix_cols(scores, &cols)
}

fn auc_matrix_cols(scores: &Tensor, latents: &[Vec<bool>]) -> Vec<Vec<f64>> {
    (0..scores.cols())
        .map(|h| {
            let s = column(scores, h);
            let mut order: Vec<usize> = (0..s.len()).collect();
            order.sort_by(|&a, &b| s[a].total_cmp(&s[b]));
            latents
                .iter()
                .map(|l| roc_auc_sorted(&s, &order, l).unwrap_or(0.5))
                .collect()
        })
        .collect()
}

/// One-to-one assignment between heads and latents maximizing the summed
/// AUC. The smaller side is fully matched.
pub fn match_concepts(auc: &[Vec<f64>]) -> Vec<ConceptMatch> {
    let heads = auc.len();
    let latents = auc.first().map_or(0, |r| r.len());
    if heads == 0 || latents == 0 {
        return vec![];
    }
    let mut out: Vec<ConceptMatch> = if latents <= heads {
        let w: Vec<Vec<f64>> = (0..latents)
            .map(|c| (0..heads).map(|h| auc[h][c]).collect())
            .collect();
        hungarian_max(&w)
            .into_iter()
            .enumerate()
            .map(|(c, h)| ConceptMatch {
                latent: c,
                head: h,
                auc: auc[h][c],
            })
            .collect()
    } else {
        hungarian_max(auc)
            .into_iter()
            .enumerate()
            .map(|(h, c)| ConceptMatch {
                latent: c,
                head: h,
                auc: auc[h][c],
            })
            .collect()
    };
    out.sort_by_key(|m| m.latent);
    out
}

fn mean_auc(m: &[ConceptMatch]) -> f64 {
    m.iter().map(|x| x.auc).sum::<f64>() / m.len().max(1) as f64
}

/// Matches concept-head scores to latent concepts and builds a permutation
/// null by shuffling sample order of the latents `permutations` times.
pub fn concept_recovery_score(
    scores: &Tensor,
    latents: &Tensor,
    permutations: usize,
    seed: u64,
) -> ConceptRecovery {
    let auc = auc_matrix(scores, latents);
    let matching = match_concepts(&auc);
    let mean_matched_auc = mean_auc(&matching);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cols: Vec<Vec<bool>> = (0..latents.cols()).map(|c| bool_column(latents, c)).collect();
    let mut perm: Vec<usize> = (0..latents.rows()).collect();
    let null_samples: Vec<f64> = (0..permutations)
        .map(|_| {
            perm.shuffle(&mut rng);
            let shuffled: Vec<Vec<bool>> = cols
                .iter()
                .map(|c| perm.iter().map(|&i| c[i]).collect())
                .collect();
            mean_auc(&match_concepts(&auc_matrix_cols(scores, &shuffled)))
        })
        .collect();
    let n = null_samples.len().max(1) as f64;
    let null_mean = null_samples.iter().sum::<f64>() / n;
    let null_std = (null_samples.iter().map(|v| (v - null_mean).powi(2)).sum::<f64>() / n).sqrt();
    ConceptRecovery {
        auc,
        matching,
        mean_matched_auc,
        null_mean,
        null_std,
        null_samples,
    }
}
