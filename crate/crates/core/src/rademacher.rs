//! Empirical Rademacher complexity of a finite hypothesis sample:
//! `E_σ sup_h (1/N) Σ_u σ_u h(u)` with σ uniform on {±1}^N.
//!
//! A finite sample of hypotheses under-estimates the supremum over the full
//! class, so these estimates are lower bounds on the true complexity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{Graph, PropagationOperator};
use crate::model::{predict, DropoutStrategy, LayerParams, ModelParams};
use crate::tensor::Matrix;

/// Largest sample size the exhaustive estimator accepts (2^N sign patterns).
pub const MAX_EXHAUSTIVE_NODES: usize = 24;

const MC_SHARD: usize = 256;
const EXHAUSTIVE_CHUNK: usize = 1 << 12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RademacherEstimate {
    pub estimate: f64,
    /// Zero for the exhaustive estimator.
    pub stderr: f64,
    pub draws: usize,
    pub exhaustive: bool,
}

fn check_values(values: &[Vec<f64>]) -> Result<usize> {
    let n = values
        .first()
        .ok_or_else(|| Error::validation("hypothesis sample is empty"))?
        .len();
    if n == 0 {
        return Err(Error::validation("hypotheses have no sample points"));
    }
    if values.iter().any(|h| h.len() != n) {
        return Err(Error::validation("hypotheses evaluated on different sample sizes"));
    }
    if values.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::validation("hypothesis values must be finite"));
    }
    Ok(n)
}

fn sup_correlation(values: &[Vec<f64>], sign: impl Fn(usize) -> f64) -> f64 {
    let n = values[0].len() as f64;
    values
        .iter()
        .map(|h| h.iter().enumerate().map(|(u, v)| sign(u) * v).sum::<f64>() / n)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Exact expectation over all 2^N sign patterns; `values[h][u]` is
/// hypothesis `h` evaluated on sample point `u`.
pub fn exhaustive_rademacher(values: &[Vec<f64>]) -> Result<RademacherEstimate> {
    let n = check_values(values)?;
    if n > MAX_EXHAUSTIVE_NODES {
        return Err(Error::validation(format!(
            "exhaustive enumeration limited to {MAX_EXHAUSTIVE_NODES} points, got {n}"
        )));
    }
    let patterns = 1usize << n;
    let chunk_sums: Vec<f64> = (0..patterns.div_ceil(EXHAUSTIVE_CHUNK))
        .into_par_iter()
        .map(|c| {
            let end = ((c + 1) * EXHAUSTIVE_CHUNK).min(patterns);
            (c * EXHAUSTIVE_CHUNK..end)
                .map(|bits| sup_correlation(values, |u| if bits >> u & 1 == 1 { 1.0 } else { -1.0 }))
                .sum()
        })
        .collect();
    Ok(RademacherEstimate {
        estimate: chunk_sums.iter().sum::<f64>() / patterns as f64,
        stderr: 0.0,
        draws: patterns,
        exhaustive: true,
    })
}

/// Monte-Carlo estimate from `draws` iid sign vectors. Draws are split into
/// fixed-size shards, each with its own ChaCha stream, so the result does
/// not depend on the thread count.
pub fn mc_rademacher(values: &[Vec<f64>], draws: usize, seed: u64) -> Result<RademacherEstimate> {
    let n = check_values(values)?;
    if draws == 0 {
        return Err(Error::validation("need at least one sigma draw"));
    }
    let shards: Vec<Vec<f64>> = (0..draws.div_ceil(MC_SHARD))
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s as u64);
            let count = MC_SHARD.min(draws - s * MC_SHARD);
            (0..count)
                .map(|_| {
                    let sigma: Vec<f64> = (0..n)
                        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                        .collect();
                    sup_correlation(values, |u| sigma[u])
                })
                .collect()
        })
        .collect();
    let sups: Vec<f64> = shards.into_iter().flatten().collect();
    let mean = sups.iter().sum::<f64>() / draws as f64;
    let stderr = if draws > 1 {
        let var = sups.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        (var / draws as f64).sqrt()
    } else {
        0.0
    };
    Ok(RademacherEstimate {
        estimate: mean,
        stderr,
        draws,
        exhaustive: false,
    })
}

/// What a hypothesis contributes per node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HypothesisOutput {
    /// Eval-mode output of one column of the final layer.
    Output(usize),
    /// Softmax cross-entropy of the eval-mode logits against the node label.
    Loss,
}

/// Evaluates every parameter setting on every node of `g`.
pub fn hypothesis_values(
    g: &Graph,
    prop: &PropagationOperator,
    hypotheses: &[ModelParams],
    strategy: DropoutStrategy,
    output: HypothesisOutput,
) -> Result<Vec<Vec<f64>>> {
    hypotheses
        .iter()
        .map(|params| {
            let emb = predict(g, prop, params, strategy)?;
            let logits = emb.logits();
            (0..logits.rows())
                .map(|u| {
                    let row = logits.row(u);
                    match output {
                        HypothesisOutput::Output(c) => row.get(c).copied().ok_or_else(|| {
                            Error::validation(format!("output column {c} outside {}", row.len()))
                        }),
                        HypothesisOutput::Loss => {
                            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                            let y = g.labels()[u];
                            row.get(y).map(|v| lse - v).ok_or_else(|| {
                                Error::validation(format!("label {y} outside {} outputs", row.len()))
                            })
                        }
                    }
                })
                .collect()
        })
        .collect()
}

/// Exhaustive estimate when `N ≤ MAX_EXHAUSTIVE_NODES` and `draws` is
/// `None`, otherwise Monte-Carlo.
pub fn empirical_rademacher(
    g: &Graph,
    prop: &PropagationOperator,
    hypotheses: &[ModelParams],
    strategy: DropoutStrategy,
    output: HypothesisOutput,
    draws: Option<usize>,
    seed: u64,
) -> Result<RademacherEstimate> {
    let values = hypothesis_values(g, prop, hypotheses, strategy, output)?;
    match draws {
        Some(d) => mc_rademacher(&values, d, seed),
        None => exhaustive_rademacher(&values),
    }
}

/// Logit giving retention `p`; saturates so that `logistic` rounds to
/// exactly 0 or 1 at the ends.
pub fn retention_logit(p: f64) -> f64 {
    const SATURATE: f64 = 40.0;
    if p >= 1.0 {
        SATURATE
    } else if p <= 0.0 {
        -SATURATE
    } else {
        (p / (1.0 - p)).ln().clamp(-SATURATE, SATURATE)
    }
}

/// Draws `count` parameter settings whose weight columns lie on the sphere
/// of radius `radii[l]`, with retention fixed to `retention[l]`.
///
/// Every column sits on the boundary, so `max_j ‖W_l(:, j)‖₂ = radii[l]`.
pub fn sample_norm_ball(
    layer_dims: &[usize],
    radii: &[f64],
    retention: &[Vec<f64>],
    count: usize,
    seed: u64,
) -> Result<Vec<ModelParams>> {
    let layers = layer_dims.len().saturating_sub(1);
    if layers == 0 || radii.len() != layers || retention.len() != layers {
        return Err(Error::validation(
            "need one radius and one retention vector per layer",
        ));
    }
    for (l, p) in retention.iter().enumerate() {
        if p.len() != layer_dims[l] {
            return Err(Error::validation(format!(
                "layer {} retention has length {}, expected {}",
                l + 1,
                p.len(),
                layer_dims[l]
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let layers = (0..layers)
                .map(|l| {
                    let (k_in, k_out) = (layer_dims[l], layer_dims[l + 1]);
                    let mut w = Matrix::zeros(k_in, k_out);
                    for c in 0..k_out {
                        let col: Vec<f64> = (0..k_in).map(|_| rng.sample(StandardNormal)).collect();
                        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                        for (r, v) in col.iter().enumerate() {
                            w.set(r, c, radii[l] * v / norm);
                        }
                    }
                    let z = retention[l].iter().map(|&p| retention_logit(p)).collect();
                    LayerParams {
                        weight: w,
                        retention_logits: Matrix::row_vector(z),
                    }
                })
                .collect();
            Ok(ModelParams { layers })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `E|Σ σ_u| / N` by counting: Σ_k C(N,k) |2k − N| / 2^N / N.
    fn walk_abs_mean(n: usize) -> f64 {
        let mut binom = 1.0;
        let mut total = 0.0;
        for k in 0..=n {
            total += binom * (2.0 * k as f64 - n as f64).abs();
            binom = binom * (n - k) as f64 / (k + 1) as f64;
        }
        total / 2f64.powi(n as i32) / n as f64
    }

    #[test]
    fn zero_hypothesis_has_zero_complexity() {
        let vals = vec![vec![0.0; 6]];
        assert_eq!(exhaustive_rademacher(&vals).unwrap().estimate, 0.0);
        assert_eq!(mc_rademacher(&vals, 100, 1).unwrap().estimate, 0.0);
    }

    #[test]
    fn symmetric_pair_matches_walk() {
        for n in [1, 4, 9, 12] {
            let vals = vec![vec![1.0; n], vec![-1.0; n]];
            let ex = exhaustive_rademacher(&vals).unwrap();
            assert!((ex.estimate - walk_abs_mean(n)).abs() < 1e-12, "n={n}");
            let mc = mc_rademacher(&vals, 4000, 7).unwrap();
            assert!((mc.estimate - walk_abs_mean(n)).abs() <= 3.0 * mc.stderr + 1e-12);
        }
    }

    #[test]
    fn mc_is_deterministic() {
        let vals = vec![vec![0.3, -1.0, 2.0], vec![1.0, 1.0, -0.5]];
        assert_eq!(mc_rademacher(&vals, 1000, 3).unwrap(), mc_rademacher(&vals, 1000, 3).unwrap());
    }

    #[test]
    fn input_validation() {
        assert!(exhaustive_rademacher(&[]).is_err());
        assert!(exhaustive_rademacher(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(exhaustive_rademacher(&[vec![0.0; MAX_EXHAUSTIVE_NODES + 1]]).is_err());
        assert!(mc_rademacher(&[vec![1.0]], 0, 1).is_err());
    }

    #[test]
    fn norm_ball_samples_sit_on_sphere() {
        let hs = sample_norm_ball(&[4, 3, 2], &[2.0, 0.5], &[vec![0.5; 4], vec![1.0; 3]], 5, 9).unwrap();
        assert_eq!(hs.len(), 5);
        for h in &hs {
            assert!((h.layers[0].max_column_norm() - 2.0).abs() < 1e-12);
            assert!((h.layers[1].max_column_norm() - 0.5).abs() < 1e-12);
            assert_eq!(h.layers[1].retention(), vec![1.0; 3]);
            assert!((h.layers[0].retention()[0] - 0.5).abs() < 1e-15);
        }
    }
}
