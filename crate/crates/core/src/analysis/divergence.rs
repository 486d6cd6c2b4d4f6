//! Layer-norm divergence `y`: the mean absolute difference over every pair
//! of elements taken from two different blocks' vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{NormIds, WideNet};

/// Which per-block norm is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormSite {
    /// The norm before the attention layer.
    Attention,
    /// The norm before the MoE (or FFN) layer.
    #[default]
    Moe,
}

/// Result of [`ln_divergence`] over γ and β.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub site: NormSite,
    pub y_gamma: f64,
    pub y_beta: f64,
    /// `pair_gamma[j][n]`: mean `|γ_ij − γ_mn|` over element pairs of blocks
    /// `j` and `n`. The diagonal is the within-block value and does not enter
    /// `y`.
    pub pair_gamma: Vec<Vec<f64>>,
    pub pair_beta: Vec<Vec<f64>>,
    /// Distinct norm objects measured (blocks sharing one norm count once).
    pub distinct: usize,
}

/// Mean of `|a_i − b_m|` over all `(i, m)`, via sorting and prefix sums.
pub fn mean_pair_distance(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut sorted = b.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut prefix = Vec::with_capacity(sorted.len() + 1);
    prefix.push(0.0);
    for v in &sorted {
        prefix.push(prefix.last().unwrap() + v);
    }
    let total = prefix[sorted.len()];
    let mut sum = 0.0;
    for &x in a {
        // b values below x contribute x − b, the rest b − x
        let below = sorted.partition_point(|&v| v < x);
        let lo = prefix[below];
        sum += x * below as f64 - lo + (total - lo) - x * (sorted.len() - below) as f64;
    }
    sum / (a.len() * b.len()) as f64
}

fn check_blocks(vectors: &[Vec<f64>]) -> Result<usize> {
    if vectors.len() < 2 {
        return Err(Error::invalid(format!(
            "layer-norm divergence needs at least 2 blocks, got {}",
            vectors.len()
        )));
    }
    let m = vectors[0].len();
    if let Some(v) = vectors.iter().find(|v| v.len() != m) {
        return Err(Error::invalid(format!("vector lengths differ: {m} vs {}", v.len())));
    }
    Ok(m)
}

/// `y = (1 / (M²·N·(N−1))) Σ_i Σ_j Σ_m Σ_{n≠j} |γ_ij − γ_mn|` and the
/// per-pair matrix.
pub fn ln_divergence(vectors: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    check_blocks(vectors)?;
    let n = vectors.len();
    let mut pairs = vec![vec![0.0; n]; n];
    for j in 0..n {
        for k in j..n {
            let d = mean_pair_distance(&vectors[j], &vectors[k]);
            pairs[j][k] = d;
            pairs[k][j] = d;
        }
    }
    let off: f64 = (0..n)
        .flat_map(|j| (0..n).filter(move |&k| k != j).map(move |k| (j, k)))
        .map(|(j, k)| pairs[j][k])
        .sum();
    Ok((off / (n * (n - 1)) as f64, pairs))
}

/// The same quantity as [`ln_divergence`] by a direct quadruple loop.
pub fn ln_divergence_brute(vectors: &[Vec<f64>]) -> Result<f64> {
    let m = check_blocks(vectors)?;
    let n = vectors.len();
    let mut sum = 0.0;
    for i in 0..m {
        for j in 0..n {
            for mm in 0..m {
                for nn in 0..n {
                    if nn != j {
                        sum += (vectors[j][i] - vectors[nn][mm]).abs();
                    }
                }
            }
        }
    }
    Ok(sum / (m * m * n * (n - 1)) as f64)
}

/// Divergence of a model's per-block norms at `site`. Blocks that reference
/// one shared norm are a single object, so a model with shared norms
/// measures `y = 0` exactly.
pub fn model_ln_divergence(model: &WideNet, site: NormSite) -> Result<DivergenceReport> {
    let norms = model.block_norms(site == NormSite::Attention);
    let mut distinct: Vec<NormIds> = Vec::new();
    for n in norms {
        if !distinct.contains(&n) {
            distinct.push(n);
        }
    }
    let p = model.params();
    if distinct.len() < 2 {
        return Ok(DivergenceReport {
            site,
            y_gamma: 0.0,
            y_beta: 0.0,
            pair_gamma: vec![vec![0.0]],
            pair_beta: vec![vec![0.0]],
            distinct: distinct.len(),
        });
    }
    let gammas: Vec<Vec<f64>> = distinct.iter().map(|n| p.get(n.gamma).data().to_vec()).collect();
    let betas: Vec<Vec<f64>> = distinct.iter().map(|n| p.get(n.beta).data().to_vec()).collect();
    let (y_gamma, pair_gamma) = ln_divergence(&gammas)?;
    let (y_beta, pair_beta) = ln_divergence(&betas)?;
    Ok(DivergenceReport {
        site,
        y_gamma,
        y_beta,
        pair_gamma,
        pair_beta,
        distinct: distinct.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::WideNetConfig;

    #[test]
    fn two_constant_blocks_one_apart() {
        let v = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        assert_eq!(ln_divergence(&v).unwrap().0, 1.0);
        assert_eq!(ln_divergence_brute(&v).unwrap(), 1.0);
    }

    #[test]
    fn single_block_errors() {
        assert!(ln_divergence(&[vec![1.0]]).is_err());
    }

    #[test]
    fn fresh_model_norms_are_all_ones() {
        let m = WideNet::new(WideNetConfig::default(), 0).unwrap();
        let r = model_ln_divergence(&m, NormSite::Moe).unwrap();
        assert_eq!((r.y_gamma, r.y_beta, r.distinct), (0.0, 0.0, 4));
    }

    #[test]
    fn shared_norms_measure_zero() {
        let cfg = WideNetConfig {
            share_ln: true,
            ..Default::default()
        };
        let mut m = WideNet::new(cfg, 0).unwrap();
        let g = m.layout().blocks[0].moe_norm.gamma;
        m.params_mut().get_mut(g).assign(&crate::tensor::Tensor::vector((0..64).map(f64::from).collect()).unwrap()).unwrap();
        let r = model_ln_divergence(&m, NormSite::Moe).unwrap();
        assert_eq!((r.y_gamma, r.distinct), (0.0, 1));
    }
}
