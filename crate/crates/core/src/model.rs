//! L-layer GCN with per-layer retention vectors and dropout baselines.
//!
//! Layer `l` computes `P · (mask(H) · W)` where `H` is the raw feature
//! matrix for the first layer and `relu` of the previous pre-activation
//! otherwise. The final layer is linear.
//!
//! With the `flexidrop` strategy the Bernoulli retention mask on the layer
//! input is replaced by its expectation `p = logistic(z)`. Scaling the input
//! columns by `p` equals scaling the rows of `W` by `p`, and the latter is
//! what the forward pass records: it keeps the first-layer gradient a
//! product with the (often sparse) feature matrix.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{logistic, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{propagation_from_edges, Graph, PropagationMode, PropagationOperator};
use crate::tensor::Matrix;

/// Initial retention logit; `logistic(2.0) ≈ 0.88`.
pub const DEFAULT_RETENTION_LOGIT: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "rate", rename_all = "snake_case")]
pub enum DropoutStrategy {
    None,
    Flexidrop,
    FixedDropout(f64),
    #[serde(rename = "dropnode")]
    DropNode(f64),
    #[serde(rename = "dropedge")]
    DropEdge(f64),
}

impl DropoutStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            DropoutStrategy::None => "none",
            DropoutStrategy::Flexidrop => "flexidrop",
            DropoutStrategy::FixedDropout(_) => "fixed_dropout",
            DropoutStrategy::DropNode(_) => "dropnode",
            DropoutStrategy::DropEdge(_) => "dropedge",
        }
    }

    pub fn rate(&self) -> Option<f64> {
        match *self {
            DropoutStrategy::FixedDropout(r)
            | DropoutStrategy::DropNode(r)
            | DropoutStrategy::DropEdge(r) => Some(r),
            _ => None,
        }
    }

    /// Builds a strategy from its name and, for fixed-rate kinds, a rate.
    pub fn from_name(name: &str, rate: f64) -> Result<Self> {
        let s = match name {
            "none" => DropoutStrategy::None,
            "flexidrop" => DropoutStrategy::Flexidrop,
            "fixed_dropout" | "dropout" => DropoutStrategy::FixedDropout(rate),
            "dropnode" => DropoutStrategy::DropNode(rate),
            "dropedge" => DropoutStrategy::DropEdge(rate),
            other => return Err(Error::validation(format!("unknown strategy {other:?}"))),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.rate() {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::validation(format!("dropout rate {r} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Retention probability implied by a fixed-rate strategy, used for bound
    /// reports of baselines.
    pub fn fixed_retention(&self) -> f64 {
        match *self {
            DropoutStrategy::FixedDropout(r) | DropoutStrategy::DropNode(r) => 1.0 - r,
            _ => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    NodeClassification,
    LinkPrediction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `[d, hidden…, out]`; length is the number of layers plus one.
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub strategy: DropoutStrategy,
    pub propagation: PropagationMode,
    pub task: Task,
    pub retention_init: f64,
}

impl ModelConfig {
    pub fn new(layer_dims: Vec<usize>, strategy: DropoutStrategy) -> Self {
        Self {
            layer_dims,
            activation: Activation::Relu,
            strategy,
            propagation: PropagationMode::RowStochastic,
            task: Task::NodeClassification,
            retention_init: DEFAULT_RETENTION_LOGIT,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 || self.layer_dims.contains(&0) {
            return Err(Error::validation(format!(
                "layer_dims {:?} needs at least two positive entries",
                self.layer_dims
            )));
        }
        if !self.retention_init.is_finite() {
            return Err(Error::validation("retention_init must be finite"));
        }
        self.strategy.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// `k_in × k_out`.
    pub weight: Matrix,
    /// Unconstrained retention logits, 1×k_in.
    pub retention_logits: Matrix,
}

impl LayerParams {
    pub fn retention(&self) -> Vec<f64> {
        self.retention_logits.data().iter().map(|&z| logistic(z)).collect()
    }

    /// `max_j ‖W(:, j)‖₂`.
    pub fn max_column_norm(&self) -> f64 {
        let w = &self.weight;
        (0..w.cols())
            .map(|c| (0..w.rows()).map(|r| w.get(r, c).powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
}

/// Tape handles for one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub weight: Var,
    pub retention_logits: Var,
}

impl ModelParams {
    /// Glorot-uniform weights in `±√(6/(fan_in+fan_out))` and constant
    /// retention logits.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = config
            .layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                Ok(LayerParams {
                    weight: Matrix::from_vec(fan_in, fan_out, data)?,
                    retention_logits: Matrix::filled(1, fan_in, config.retention_init),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Records all parameters on `tape`. Weights always require gradients;
    /// retention logits only when `train_retention` is set.
    pub fn attach(&self, tape: &mut Tape, train_retention: bool) -> Vec<LayerVars> {
        self.layers
            .iter()
            .map(|l| LayerVars {
                weight: tape.param(l.weight.clone()),
                retention_logits: if train_retention {
                    tape.param(l.retention_logits.clone())
                } else {
                    tape.constant(l.retention_logits.clone())
                },
            })
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.all_finite() && l.retention_logits.all_finite())
    }
}

/// Retention probabilities `p^(l) = logistic(z^(l))` for every layer.
pub fn retention_probabilities(params: &ModelParams) -> Vec<Vec<f64>> {
    params.layers.iter().map(LayerParams::retention).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
    /// Like `Train`, but flexidrop layers draw a Bernoulli(p) column mask
    /// (no rescaling) instead of using the expectation. Diagnostics only.
    Sample,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Pre-activation output of every layer; the last one is the logits.
    pub pre_activations: Vec<Var>,
    pub logits: Var,
}

fn check_dims(g: &Graph, p: &PropagationOperator, vars: &[LayerVars], tape: &Tape) -> Result<()> {
    if p.num_nodes() != g.num_nodes() {
        return Err(Error::shape(
            "forward",
            format!("operator for {} nodes, graph has {}", p.num_nodes(), g.num_nodes()),
        ));
    }
    let mut width = g.num_features();
    for (l, v) in vars.iter().enumerate() {
        let (w, z) = (tape.value(v.weight), tape.value(v.retention_logits));
        if w.rows() != width || z.len() != width {
            return Err(Error::shape(
                "forward",
                format!(
                    "layer {} expects input width {width}, weight {:?}, retention {:?}",
                    l + 1,
                    w.shape(),
                    z.shape()
                ),
            ));
        }
        width = w.cols();
    }
    if vars.is_empty() {
        return Err(Error::validation("model has no layers"));
    }
    Ok(())
}

/// Runs the network on `tape`.
pub fn forward<R: Rng>(
    tape: &mut Tape,
    g: &Graph,
    prop: &PropagationOperator,
    vars: &[LayerVars],
    strategy: DropoutStrategy,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardOutput> {
    check_dims(g, prop, vars, tape)?;
    let stochastic = mode != Mode::Eval;

    let matrix = match strategy {
        DropoutStrategy::DropEdge(rate) if stochastic && rate > 0.0 => {
            let kept: Vec<(usize, usize)> = g
                .edges()
                .iter()
                .copied()
                .filter(|_| rng.random::<f64>() >= rate)
                .collect();
            propagation_from_edges(g.num_nodes(), &kept, prop.mode)?.matrix
        }
        _ => Arc::clone(&prop.matrix),
    };

    let mut h = tape.constant(g.features().clone());
    let mut pre = Vec::with_capacity(vars.len());
    for (l, lv) in vars.iter().enumerate() {
        let (n, k) = tape.value(h).shape();
        let mut weight = lv.weight;
        match strategy {
            DropoutStrategy::Flexidrop if mode == Mode::Sample => {
                let probs: Vec<f64> = tape
                    .value(lv.retention_logits)
                    .data()
                    .iter()
                    .map(|&z| logistic(z))
                    .collect();
                let mask: Vec<f64> = probs
                    .iter()
                    .map(|&p| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
                    .collect();
                let mask = tape.constant(Matrix::row_vector(mask));
                h = tape.row_broadcast_mul(h, mask)?;
            }
            DropoutStrategy::Flexidrop => {
                let p = tape.sigmoid(lv.retention_logits)?;
                weight = tape.scale_rows(lv.weight, p)?;
            }
            DropoutStrategy::FixedDropout(rate) if stochastic => {
                let keep = 1.0 / (1.0 - rate);
                let mask: Vec<f64> = (0..n * k)
                    .map(|_| if rng.random::<f64>() >= rate { keep } else { 0.0 })
                    .collect();
                let mask = tape.constant(Matrix::from_vec(n, k, mask)?);
                h = tape.mul(h, mask)?;
            }
            DropoutStrategy::DropNode(rate) if stochastic => {
                let keep = 1.0 / (1.0 - rate);
                let mut mask = Matrix::zeros(n, k);
                for r in 0..n {
                    if rng.random::<f64>() >= rate {
                        mask.row_mut(r).fill(keep);
                    }
                }
                let mask = tape.constant(mask);
                h = tape.mul(h, mask)?;
            }
            _ => {}
        }
        let hw = tape.matmul(h, weight)?;
        let z = tape.spmm(&matrix, hw)?;
        if !tape.value(z).all_finite() {
            return Err(Error::NonFiniteLayer { layer: l + 1 });
        }
        pre.push(z);
        if l + 1 < vars.len() {
            h = tape.relu(z)?;
        }
    }
    let logits = *pre.last().expect("at least one layer");
    Ok(ForwardOutput {
        pre_activations: pre,
        logits,
    })
}

/// Values of an eval-mode forward pass.
#[derive(Clone, Debug)]
pub struct Embeddings {
    pub pre_activations: Vec<Matrix>,
}

impl Embeddings {
    pub fn logits(&self) -> &Matrix {
        self.pre_activations.last().expect("at least one layer")
    }
}

/// Deterministic eval-mode forward without gradient tracking.
pub fn predict(
    g: &Graph,
    prop: &PropagationOperator,
    params: &ModelParams,
    strategy: DropoutStrategy,
) -> Result<Embeddings> {
    let mut tape = Tape::new();
    let vars = params.attach(&mut tape, false);
    // Eval mode draws nothing from the generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = forward(&mut tape, g, prop, &vars, strategy, Mode::Eval, &mut rng)?;
    Ok(Embeddings {
        pre_activations: out
            .pre_activations
            .iter()
            .map(|&v| tape.value(v).clone())
            .collect(),
    })
}

/// `logistic(⟨h_u, h_v⟩)` for every pair.
pub fn link_scores(embeddings: &Matrix, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::validation("no pairs to score"));
    }
    pairs
        .iter()
        .map(|&(u, v)| {
            if u >= embeddings.rows() || v >= embeddings.rows() {
                return Err(Error::validation(format!(
                    "pair ({u}, {v}) outside {} nodes",
                    embeddings.rows()
                )));
            }
            let dot: f64 = embeddings
                .row(u)
                .iter()
                .zip(embeddings.row(v))
                .map(|(a, b)| a * b)
                .sum();
            Ok(logistic(dot))
        })
        .collect()
}
