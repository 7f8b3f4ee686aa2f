//! Task metrics and embedding smoothness.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Embeddings;
use crate::tensor::Matrix;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of masked nodes whose argmax logit equals the label.
pub fn accuracy(logits: &Matrix, labels: &[usize], mask: &[bool]) -> Result<f64> {
    if labels.len() != logits.rows() || mask.len() != logits.rows() {
        return Err(Error::shape(
            "accuracy",
            format!(
                "{} logit rows, {} labels, mask of {}",
                logits.rows(),
                labels.len(),
                mask.len()
            ),
        ));
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        total += 1;
        if argmax(logits.row(i)) == labels[i] {
            hit += 1;
        }
    }
    if total == 0 {
        return Err(Error::validation("accuracy over an empty mask"));
    }
    Ok(hit as f64 / total as f64)
}

/// `(1/N) Σ_u Σ_{v ∈ N(u)} ‖x_u − x_v‖²` over the graph's own edges (no
/// self-loops), so every undirected edge counts twice.
pub fn dirichlet_energy(embeddings: &Matrix, g: &Graph) -> Result<f64> {
    if embeddings.rows() != g.num_nodes() {
        return Err(Error::shape(
            "dirichlet_energy",
            format!("{} embedding rows for {} nodes", embeddings.rows(), g.num_nodes()),
        ));
    }
    let total: f64 = g
        .edges()
        .iter()
        .map(|&(u, v)| {
            embeddings
                .row(u)
                .iter()
                .zip(embeddings.row(v))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
        })
        .sum();
    Ok(2.0 * total / g.num_nodes() as f64)
}

/// Dirichlet energy of every layer's pre-activation output.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergyProfile {
    pub energies: Vec<f64>,
}

impl EnergyProfile {
    pub fn of(embeddings: &Embeddings, g: &Graph) -> Result<Self> {
        let energies = embeddings
            .pre_activations
            .iter()
            .map(|h| dirichlet_energy(h, g))
            .collect::<Result<_>>()?;
        Ok(Self { energies })
    }

    pub fn final_energy(&self) -> f64 {
        self.energies.last().copied().unwrap_or(0.0)
    }
}

fn check_binary(scores: &[f64], targets: &[bool]) -> Result<()> {
    if scores.len() != targets.len() {
        return Err(Error::shape(
            "binary metric",
            format!("{} scores, {} targets", scores.len(), targets.len()),
        ));
    }
    if scores.is_empty() {
        return Err(Error::validation("no scored pairs"));
    }
    Ok(())
}

/// Fraction of pairs with `(score ≥ threshold) == target`.
pub fn binary_accuracy(scores: &[f64], targets: &[bool], threshold: f64) -> Result<f64> {
    check_binary(scores, targets)?;
    let hit = scores
        .iter()
        .zip(targets)
        .filter(|(&s, &t)| (s >= threshold) == t)
        .count();
    Ok(hit as f64 / scores.len() as f64)
}

/// Area under the ROC curve via the rank-sum statistic, tied scores sharing
/// their average rank.
pub fn auc(scores: &[f64], targets: &[bool]) -> Result<f64> {
    check_binary(scores, targets)?;
    let pos = targets.iter().filter(|&&t| t).count();
    let neg = targets.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::validation("AUC needs both positive and negative pairs"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * order[i..=j].iter().filter(|&&k| targets[k]).count() as f64;
        i = j + 1;
    }
    Ok((rank_sum - (pos * (pos + 1)) as f64 / 2.0) / (pos * neg) as f64)
}

/// Sample mean and standard deviation with divisor `n − 1` (0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair_graph() -> Graph {
        Graph::new(
            Matrix::zeros(2, 1),
            vec![0, 1],
            2,
            [(0, 1)],
            [vec![true, false], vec![false; 2], vec![false, true]],
        )
        .unwrap()
    }

    #[test]
    fn one_hot_logits_are_perfect() {
        let labels = vec![2, 0, 1];
        let mut l = Matrix::zeros(3, 3);
        for (i, &y) in labels.iter().enumerate() {
            l.set(i, y, 1.0);
        }
        assert_eq!(accuracy(&l, &labels, &[true; 3]).unwrap(), 1.0);
    }

    #[test]
    fn zero_logits_predict_class_zero() {
        let l = Matrix::zeros(4, 4);
        assert_eq!(accuracy(&l, &[0, 1, 2, 3], &[true; 4]).unwrap(), 0.25);
    }

    #[test]
    fn empty_mask_rejected() {
        assert!(accuracy(&Matrix::zeros(2, 2), &[0, 1], &[false, false]).is_err());
    }

    #[test]
    fn energy_of_two_orthogonal_nodes() {
        let g = pair_graph();
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(dirichlet_energy(&x, &g).unwrap(), 2.0);
        assert_eq!(dirichlet_energy(&x.scale(3.0), &g).unwrap(), 18.0);
        assert_eq!(dirichlet_energy(&Matrix::filled(2, 2, 0.7), &g).unwrap(), 0.0);
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.2, 0.9, 0.8], &[true, true, false, false]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert!(auc(&[0.5], &[true]).is_err());
    }

    #[test]
    fn threshold_accuracy() {
        let acc = binary_accuracy(&[0.5, 0.49, 0.7, 0.2], &[true, false, false, true], 0.5).unwrap();
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(m, 3.0);
        assert!((s - 2.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}
