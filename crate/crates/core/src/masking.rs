//! Corrupted-image construction: random and saliency-ranked patch masking.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{GridImage, Prompt, Symbol};
use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    Random,
    Semantic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchMask {
    pub width: usize,
    pub height: usize,
    pub masked: Vec<bool>,
    pub strategy: MaskStrategy,
    pub ratio: f64,
}

impl PatchMask {
    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.masked.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyProvenance {
    AttentionDerived,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub scores: Vec<f64>,
    pub provenance: SaliencyProvenance,
}

/// Per-layer attention: `heads[h][query][key]`, each row a distribution over
/// patches.
pub type AttentionLayer = Vec<Vec<Vec<f64>>>;

fn check_ratio(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Domain(format!("mask ratio must lie in [0, 1], got {p}")))
    }
}

/// Masks each patch independently with probability `p`.
///
/// One uniform draw per patch in row-major order; the patch is masked when the
/// draw is below `p`.
pub fn random_mask(image: &GridImage, p: f64, stream: RngStream) -> Result<(GridImage, PatchMask)> {
    check_ratio(p)?;
    let mut rng = stream.rng();
    let masked: Vec<bool> = (0..image.num_patches())
        .map(|_| rng.random::<f64>() < p)
        .collect();
    let out = image.with_masked(&masked)?;
    Ok((
        out,
        PatchMask {
            width: image.width(),
            height: image.height(),
            masked,
            strategy: MaskStrategy::Random,
            ratio: p,
        },
    ))
}

/// Attention received per patch, head-averaged then layer-averaged.
///
/// `s_i = mean_{l ∈ layers} Σ_j mean_h A[l][h][j][i]`. The grids carry no
/// class token, so every query row contributes. Query rows may come from
/// patches or from decoding steps; only the key dimension must agree.
pub fn saliency_from_attention(attn: &[AttentionLayer], layers: &[usize]) -> Result<SaliencyMap> {
    if layers.is_empty() {
        return Err(Error::Validation("no attention layers selected".into()));
    }
    let mut n = None;
    for &l in layers {
        let layer = attn
            .get(l)
            .ok_or_else(|| Error::Validation(format!("layer {l} out of range ({})", attn.len())))?;
        if layer.is_empty() {
            return Err(Error::Validation(format!("layer {l} has no heads")));
        }
        for (h, head) in layer.iter().enumerate() {
            let size = *n.get_or_insert(head.first().map_or(0, Vec::len));
            if head.is_empty() || head.iter().any(|row| row.len() != size) {
                return Err(Error::Validation(format!(
                    "layer {l} head {h} rows do not all span {size} patches"
                )));
            }
            for (j, row) in head.iter().enumerate() {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-6 || row.iter().any(|&a| !(a >= 0.0)) {
                    return Err(Error::Validation(format!(
                        "layer {l} head {h} row {j} is not stochastic (sum {s})"
                    )));
                }
            }
        }
    }
    let n = n.unwrap_or(0);
    let mut scores = vec![0.0; n];
    for &l in layers {
        let heads = &attn[l];
        let mut layer_scores = vec![0.0; n];
        for head in heads {
            for row in head {
                for (i, a) in row.iter().enumerate() {
                    layer_scores[i] += a;
                }
            }
        }
        for (s, ls) in scores.iter_mut().zip(&layer_scores) {
            *s += ls / heads.len() as f64;
        }
    }
    for s in &mut scores {
        *s /= layers.len() as f64;
    }
    Ok(SaliencyMap {
        scores,
        provenance: SaliencyProvenance::AttentionDerived,
    })
}

/// Indices of the `k` highest scores, ties broken by ascending index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Masks the `floor(p·N)` most salient patches.
pub fn semantic_mask(image: &GridImage, sal: &SaliencyMap, p: f64) -> Result<(GridImage, PatchMask)> {
    check_ratio(p)?;
    let n = image.num_patches();
    if sal.scores.len() != n {
        return Err(Error::Shape(format!(
            "saliency has {} scores for {n} patches",
            sal.scores.len()
        )));
    }
    if sal.scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Validation("saliency scores must be finite".into()));
    }
    // Tolerate p·N landing a hair below an integer (e.g. 0.6 * 10).
    let k = ((p * n as f64) + 1e-9).floor() as usize;
    let mut masked = vec![false; n];
    for i in top_k_indices(&sal.scores, k.min(n)) {
        masked[i] = true;
    }
    let out = image.with_masked(&masked)?;
    Ok((
        out,
        PatchMask {
            width: image.width(),
            height: image.height(),
            masked,
            strategy: MaskStrategy::Semantic,
            ratio: p,
        },
    ))
}

/// 1.0 on the patches the generator marked as task-relevant, 0.0 elsewhere.
pub fn oracle_saliency(prompt: &Prompt) -> Result<SaliencyMap> {
    let meta = prompt
        .task
        .as_ref()
        .ok_or_else(|| Error::Unsupported("prompt carries no task metadata".into()))?;
    let mut scores = vec![0.0; prompt.image.num_patches()];
    for &i in &meta.target_cells {
        *scores
            .get_mut(i)
            .ok_or_else(|| Error::Shape(format!("target cell {i} outside the grid")))? = 1.0;
    }
    Ok(SaliencyMap {
        scores,
        provenance: SaliencyProvenance::Oracle,
    })
}

/// Fully masked copy of `image`.
pub fn mask_all(image: &GridImage) -> GridImage {
    GridImage::filled(image.width(), image.height(), Symbol::MASKED)
        .expect("dimensions come from a valid image")
}
