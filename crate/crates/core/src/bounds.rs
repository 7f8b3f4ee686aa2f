//! Rademacher-complexity bounds and the differentiable regularizer built
//! from them.
//!
//! The multi-layer bound is
//!
//! ```text
//! R_S(ℓ∘f) ≤ M · Π_l B_l ‖p_l‖₂,   M = 2^L · C · √(2 ln(2d) / N) · max_u ‖x_u‖∞
//! ```
//!
//! where `B_l` is the largest column ℓ₂ norm of `W_l` and `p_l` the layer's
//! retention vector. Logarithms are natural. The regularizer is the same
//! expression evaluated on the current parameters, recorded on a tape.

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{feature_inf_norm_max, Graph, PropagationMode};
use crate::model::{DropoutStrategy, ModelParams};
use crate::tensor::{CsrMatrix, Matrix};

/// Per-node loss cap used when reporting the generalization bound, which
/// needs a bounded loss. Training never clamps.
pub const REPORT_LOSS_CAP: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundContext {
    pub num_layers: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub num_nodes: usize,
    pub x_inf_max: f64,
    pub lambda: f64,
}

impl BoundContext {
    pub fn new(
        num_layers: usize,
        num_classes: usize,
        feature_dim: usize,
        num_nodes: usize,
        x_inf_max: f64,
        lambda: f64,
    ) -> Result<Self> {
        let ctx = Self {
            num_layers,
            num_classes,
            feature_dim,
            num_nodes,
            x_inf_max,
            lambda,
        };
        ctx.validate()?;
        Ok(ctx)
    }

    pub fn for_graph(g: &Graph, num_layers: usize, num_classes: usize, lambda: f64) -> Result<Self> {
        Self::new(
            num_layers,
            num_classes,
            g.num_features(),
            g.num_nodes(),
            feature_inf_norm_max(g),
            lambda,
        )
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_layers", self.num_layers),
            ("num_classes", self.num_classes),
            ("feature_dim", self.feature_dim),
            ("num_nodes", self.num_nodes),
        ] {
            if v == 0 {
                return Err(Error::validation(format!("{name} must be positive")));
            }
        }
        if !(self.x_inf_max >= 0.0 && self.x_inf_max.is_finite()) {
            return Err(Error::validation("x_inf_max must be finite and non-negative"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::validation("lambda must be non-negative"));
        }
        Ok(())
    }
}

/// `M = 2^L · C · √(2 ln(2d) / N) · max_u ‖x_u‖∞`.
pub fn bound_constant(ctx: &BoundContext) -> Result<f64> {
    ctx.validate()?;
    let depth = i32::try_from(ctx.num_layers)
        .map_err(|_| Error::validation("num_layers too large"))?;
    let m = 2f64.powi(depth)
        * ctx.num_classes as f64
        * (2.0 * (2.0 * ctx.feature_dim as f64).ln() / ctx.num_nodes as f64).sqrt()
        * ctx.x_inf_max;
    if !m.is_finite() {
        return Err(Error::validation("bound constant is not finite"));
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SingleLayerBoundInputs {
    /// Retention probability.
    pub p: f64,
    pub num_nodes: usize,
    /// Bound on ‖w‖₂.
    pub weight_norm: f64,
    /// Bound on every ‖x_u‖₂.
    pub feature_norm: f64,
    /// Bound on every row of the propagation operator.
    pub row_norm: f64,
}

/// `p · B₁ B₂ B₃ / √N` for a single linear graph-convolution layer.
pub fn single_layer_bound(inp: &SingleLayerBoundInputs) -> Result<f64> {
    if inp.num_nodes == 0 {
        return Err(Error::validation("num_nodes must be positive"));
    }
    if !(0.0..=1.0).contains(&inp.p) {
        return Err(Error::validation(format!("retention {} outside [0, 1]", inp.p)));
    }
    if [inp.weight_norm, inp.feature_norm, inp.row_norm]
        .iter()
        .any(|b| !(*b >= 0.0))
    {
        return Err(Error::validation("norm bounds must be non-negative"));
    }
    Ok(inp.p * inp.weight_norm * inp.feature_norm * inp.row_norm / (inp.num_nodes as f64).sqrt())
}

/// `M · Π_l max_j ‖W_l(:, j)‖₂ · ‖p_l‖₂` recorded on `tape`.
///
/// `retention[l]` holds the retention probabilities of layer `l` (any
/// vector shape). The max over columns routes its subgradient to the
/// lowest-index maximal column.
pub fn regularizer(tape: &mut Tape, m: f64, weights: &[Var], retention: &[Var]) -> Result<Var> {
    if weights.len() != retention.len() {
        return Err(Error::validation(format!(
            "{} weight matrices but {} retention vectors",
            weights.len(),
            retention.len()
        )));
    }
    let mut factors = Vec::with_capacity(2 * weights.len());
    for (&w, &p) in weights.iter().zip(retention) {
        let cols = tape.column_l2_norms(w)?;
        factors.push(tape.max_reduce(cols)?);
        let column = if tape.value(p).rows() == 1 {
            tape.transpose(p)?
        } else {
            p
        };
        factors.push(tape.column_l2_norms(column)?);
    }
    let stacked = tape.stack(&factors)?;
    let product = tape.product_reduce(stacked)?;
    tape.scalar_mul(product, m)
}

/// Retention vectors in effect for `strategy`: learned probabilities for
/// flexidrop, `1 − rate` for dropout/dropnode, ones otherwise.
pub fn effective_retention(params: &ModelParams, strategy: DropoutStrategy) -> Vec<Vec<f64>> {
    params
        .layers
        .iter()
        .map(|l| match strategy {
            DropoutStrategy::Flexidrop => l.retention(),
            s => vec![s.fixed_retention(); l.weight.rows()],
        })
        .collect()
}

/// The multi-layer bound evaluated on `params` with the given retention
/// vectors. Shares [`regularizer`] so the two agree exactly.
pub fn network_bound_with(ctx: &BoundContext, params: &ModelParams, retention: &[Vec<f64>]) -> Result<f64> {
    let m = bound_constant(ctx)?;
    let mut tape = Tape::new();
    let weights: Vec<Var> = params
        .layers
        .iter()
        .map(|l| tape.constant(l.weight.clone()))
        .collect();
    let ps: Vec<Var> = retention
        .iter()
        .map(|p| tape.constant(Matrix::row_vector(p.clone())))
        .collect();
    let r = regularizer(&mut tape, m, &weights, &ps)?;
    tape.scalar(r)
}

/// The multi-layer bound with retention `logistic(z)` from `params`.
pub fn network_bound(ctx: &BoundContext, params: &ModelParams) -> Result<f64> {
    let m = bound_constant(ctx)?;
    let mut tape = Tape::new();
    let vars = params.attach(&mut tape, false);
    let weights: Vec<Var> = vars.iter().map(|v| v.weight).collect();
    let ps = vars
        .iter()
        .map(|v| tape.sigmoid(v.retention_logits))
        .collect::<Result<Vec<_>>>()?;
    let r = regularizer(&mut tape, m, &weights, &ps)?;
    tape.scalar(r)
}

/// `empirical + 2·rademacher + 3·B·√(ln(2/δ)/n)`.
pub fn generalization_bound(
    empirical_loss: f64,
    rademacher: f64,
    loss_cap: f64,
    delta: f64,
    n: usize,
) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::validation(format!("delta {delta} outside (0, 1)")));
    }
    if n == 0 {
        return Err(Error::validation("n must be positive"));
    }
    if !(empirical_loss >= 0.0 && rademacher >= 0.0 && loss_cap >= 0.0) {
        return Err(Error::validation("bound inputs must be non-negative"));
    }
    Ok(empirical_loss + 2.0 * rademacher + 3.0 * loss_cap * ((2.0 / delta).ln() / n as f64).sqrt())
}

/// Mean softmax cross-entropy over `mask`, each node's loss clamped to `cap`.
pub fn capped_cross_entropy(logits: &Matrix, labels: &[usize], mask: &[bool], cap: f64) -> Result<f64> {
    let rows: Vec<usize> = (0..logits.rows()).filter(|&i| mask[i]).collect();
    if rows.is_empty() {
        return Err(Error::validation("empty mask"));
    }
    let total: f64 = rows
        .iter()
        .map(|&i| {
            let row = logits.row(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            (lse - row[labels[i]]).min(cap)
        })
        .sum();
    Ok(total / rows.len() as f64)
}

/// Largest ℓ₁ norm of a row; 1 for row-stochastic operators.
pub fn max_row_l1_norm(p: &CsrMatrix) -> f64 {
    (0..p.rows())
        .map(|r| p.row(r).map(|(_, v)| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Largest ℓ₂ norm of a node feature vector.
pub fn max_feature_l2_norm(x: &Matrix) -> f64 {
    (0..x.rows())
        .map(|r| x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundReport {
    #[serde(rename = "M")]
    pub m: f64,
    /// `max_j ‖W_l(:, j)‖₂` per layer.
    pub weight_norms: Vec<f64>,
    /// `‖p_l‖₂` per layer.
    pub retention_norms: Vec<f64>,
    pub network_bound: f64,
    pub mc_estimate: Option<f64>,
    pub mc_stderr: Option<f64>,
    pub warnings: Vec<String>,
}

impl BoundReport {
    pub fn for_model(
        ctx: &BoundContext,
        params: &ModelParams,
        strategy: DropoutStrategy,
        mode: PropagationMode,
    ) -> Result<Self> {
        let retention = effective_retention(params, strategy);
        let mut warnings = Vec::new();
        if mode == PropagationMode::Symmetric {
            let msg = "bound assumes row-stochastic aggregation; symmetric normalization was used".to_string();
            log::warn!("{msg}");
            warnings.push(msg);
        }
        Ok(Self {
            m: bound_constant(ctx)?,
            weight_norms: params.layers.iter().map(|l| l.max_column_norm()).collect(),
            retention_norms: retention
                .iter()
                .map(|p| p.iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect(),
            network_bound: network_bound_with(ctx, params, &retention)?,
            mc_estimate: None,
            mc_stderr: None,
            warnings,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerParams, ModelConfig};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn cora_constant() {
        let ctx = BoundContext::new(2, 7, 1433, 2708, 1.0, 0.5).unwrap();
        let m = bound_constant(&ctx).unwrap();
        assert!((m - 2.146_958_159_577_883).abs() < 1e-12, "{m}");
        let zero = BoundContext { x_inf_max: 0.0, ..ctx.clone() };
        assert_eq!(bound_constant(&zero).unwrap(), 0.0);
    }

    #[test]
    fn constant_scaling() {
        let ctx = BoundContext::new(2, 3, 10, 50, 1.5, 0.5).unwrap();
        let m = bound_constant(&ctx).unwrap();
        let deeper = BoundContext { num_layers: 4, ..ctx.clone() };
        assert_eq!(bound_constant(&deeper).unwrap(), 4.0 * m);
        let more = BoundContext { num_nodes: 200, ..ctx.clone() };
        assert!(close(bound_constant(&more).unwrap(), m / 2.0, 1e-15));
        assert!(BoundContext::new(2, 3, 0, 50, 1.0, 0.5).is_err());
    }

    #[test]
    fn single_layer_values() {
        let mk = |p| SingleLayerBoundInputs {
            p,
            num_nodes: 100,
            weight_norm: 1.0,
            feature_norm: 1.0,
            row_norm: 1.0,
        };
        assert!(close(single_layer_bound(&mk(1.0)).unwrap(), 0.1, 1e-15));
        assert!(close(single_layer_bound(&mk(0.5)).unwrap(), 0.05, 1e-15));
        assert_eq!(single_layer_bound(&mk(0.0)).unwrap(), 0.0);
        assert!(single_layer_bound(&SingleLayerBoundInputs { num_nodes: 0, ..mk(1.0) }).is_err());
    }

    fn one_layer(weight: Matrix, p: f64) -> ModelParams {
        let k = weight.rows();
        let z = (p / (1.0 - p)).ln();
        ModelParams {
            layers: vec![LayerParams {
                weight,
                retention_logits: Matrix::filled(1, k, z),
            }],
        }
    }

    #[test]
    fn regularizer_hand_value() {
        let w = Matrix::from_rows(&[vec![3.0, 0.0], vec![4.0, 0.0]]).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(w);
        let p = tape.param(Matrix::row_vector(vec![0.5, 0.5]));
        let r = regularizer(&mut tape, 1.0, &[wv], &[p]).unwrap();
        let expect = 5.0 * 0.5f64.sqrt();
        assert!(close(tape.scalar(r).unwrap(), expect, 1e-15));
        assert!((expect - 3.5355).abs() < 1e-4);
    }

    #[test]
    fn regularizer_scales_with_weight() {
        let cfg = ModelConfig::new(vec![5, 4, 3], DropoutStrategy::Flexidrop);
        let params = ModelParams::init(&cfg, 1).unwrap();
        let ctx = BoundContext::new(2, 3, 5, 20, 1.0, 0.5).unwrap();
        let base = network_bound(&ctx, &params).unwrap();
        let mut scaled = params.clone();
        scaled.layers[1].weight = scaled.layers[1].weight.scale(2.5);
        assert!(close(network_bound(&ctx, &scaled).unwrap(), 2.5 * base, 1e-14));
        let mut starved = params.clone();
        starved.layers[0].retention_logits = Matrix::filled(1, 5, -200.0);
        assert!(network_bound(&ctx, &starved).unwrap() < 1e-80);
    }

    #[test]
    fn full_retention_gives_sqrt_width() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let params = one_layer(w, 0.5);
        let ctx = BoundContext::new(1, 2, 3, 10, 1.0, 0.5).unwrap();
        let m = bound_constant(&ctx).unwrap();
        let b = network_bound_with(&ctx, &params, &[vec![1.0; 3]]).unwrap();
        assert!(close(b, m * 5f64.sqrt() * 3f64.sqrt(), 1e-14));
    }

    #[test]
    fn generalization_values() {
        let b = generalization_bound(0.5, 0.1, 1.0, 0.05, 100).unwrap();
        assert!((b - 1.276_193_674_791_952).abs() < 1e-12, "{b}");
        assert_eq!(generalization_bound(0.3, 0.0, 0.0, 0.5, 10).unwrap(), 0.3);
        assert!(generalization_bound(0.3, 0.1, 1.0, 0.2, 10).unwrap() < generalization_bound(0.3, 0.1, 1.0, 0.1, 10).unwrap());
        for d in [0.0, 1.0, -0.5, 2.0] {
            assert!(generalization_bound(0.5, 0.1, 1.0, d, 100).is_err());
        }
    }

    #[test]
    fn capped_loss() {
        let logits = Matrix::from_rows(&[vec![0.0, 0.0], vec![100.0, -100.0]]).unwrap();
        let l = capped_cross_entropy(&logits, &[0, 1], &[true, true], REPORT_LOSS_CAP).unwrap();
        assert!(close(l, (std::f64::consts::LN_2 + 10.0) / 2.0, 1e-15));
    }

    #[test]
    fn report_warns_for_symmetric() {
        let params = one_layer(Matrix::identity(2), 0.5);
        let ctx = BoundContext::new(1, 2, 2, 4, 1.0, 0.5).unwrap();
        let sym = BoundReport::for_model(&ctx, &params, DropoutStrategy::Flexidrop, PropagationMode::Symmetric).unwrap();
        assert_eq!(sym.warnings.len(), 1);
        let row = BoundReport::for_model(&ctx, &params, DropoutStrategy::Flexidrop, PropagationMode::RowStochastic).unwrap();
        assert!(row.warnings.is_empty());
        assert!(close(row.network_bound, network_bound(&ctx, &params).unwrap(), 1e-15));
        let json = serde_json::to_value(&row).unwrap();
        assert!(json.get("M").is_some());
    }
}
