//! Full-batch Adam training of the objective `loss + λ·R`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::bounds::{bound_constant, effective_retention, regularizer, BoundContext};
use crate::error::{Error, Result};
use crate::graph::{build_propagation, sample_non_edges, split_edges, EdgeSplit, Graph, PropagationOperator};
use crate::metrics::{accuracy, auc, binary_accuracy};
use crate::model::{forward, link_scores, predict, DropoutStrategy, Mode, ModelConfig, ModelParams, Task};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// Validation and test fractions of edges held out for link prediction.
    pub edge_split: [f64; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 256,
            learning_rate: 0.01,
            lambda: 0.5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            eval_every: 1,
            edge_split: [0.1, 0.2],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::validation("lambda must be finite and non-negative"));
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2)) {
            return Err(Error::validation("Adam betas must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::validation("adam_eps must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::validation("eval_every must be at least 1"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Matrix,
    pub v: Matrix,
    pub t: i32,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(param: &mut Matrix, grad: &Matrix, state: &mut AdamState, h: &AdamHyper) -> Result<()> {
    if param.shape() != grad.shape() || state.m.shape() != grad.shape() {
        return Err(Error::shape(
            "adam_step",
            format!("param {:?}, grad {:?}, state {:?}", param.shape(), grad.shape(), state.m.shape()),
        ));
    }
    state.t += 1;
    let c1 = 1.0 - h.beta1.powi(state.t);
    let c2 = 1.0 - h.beta2.powi(state.t);
    let (m, v) = (state.m.data_mut(), state.v.data_mut());
    for (i, (p, g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
        *p -= h.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + h.eps);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RetentionStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl RetentionStats {
    fn of(p: &[f64]) -> Self {
        Self {
            min: p.iter().copied().fold(f64::INFINITY, f64::min),
            mean: p.iter().sum::<f64>() / p.len() as f64,
            max: p.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    /// Link prediction only.
    pub test_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Task loss before this epoch's update.
    pub loss: f64,
    /// Regularizer value before this epoch's update. For fixed-rate
    /// strategies this is the bound with their implied retention.
    pub regularizer: f64,
    pub objective: f64,
    /// Accuracies after this epoch's update.
    pub metrics: Metrics,
    pub retention: Vec<RetentionStats>,
    pub elapsed_secs: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BestVal {
    pub epoch: usize,
    pub val_acc: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRecord {
    pub task: Task,
    pub strategy: DropoutStrategy,
    pub lambda: f64,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub final_metrics: Option<Metrics>,
    pub best_val: Option<BestVal>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// One row per logged epoch. Timing is left out so that reruns produce
    /// identical bytes.
    pub fn to_csv(&self) -> String {
        let layers = self.epochs.first().map_or(0, |e| e.retention.len());
        let mut out = String::from("epoch,loss,regularizer,objective,train_acc,val_acc,test_acc,test_auc");
        for l in 1..=layers {
            let _ = write!(out, ",p{l}_min,p{l}_mean,p{l}_max");
        }
        out.push('\n');
        for e in &self.epochs {
            let m = &e.metrics;
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},{}",
                e.epoch,
                e.loss,
                e.regularizer,
                e.objective,
                m.train_acc,
                m.val_acc,
                m.test_acc,
                m.test_auc.map(|a| a.to_string()).unwrap_or_default()
            );
            for r in &e.retention {
                let _ = write!(out, ",{},{},{}", r.min, r.mean, r.max);
            }
            out.push('\n');
        }
        out
    }

    /// Same data as the CSV with timing removed, for equality checks.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.wall_clock_secs = 0.0;
        for e in &mut r.epochs {
            e.elapsed_secs = 0.0;
        }
        r
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub record: RunRecord,
    pub params: ModelParams,
}

struct LinkData {
    split: EdgeSplit,
    known: HashSet<(usize, usize)>,
    val: (Vec<(usize, usize)>, Vec<bool>),
    test: (Vec<(usize, usize)>, Vec<bool>),
}

fn labelled(pos: &[(usize, usize)], neg: &[(usize, usize)]) -> (Vec<(usize, usize)>, Vec<bool>) {
    let pairs = pos.iter().chain(neg).copied().collect();
    let targets = std::iter::repeat_n(true, pos.len())
        .chain(std::iter::repeat_n(false, neg.len()))
        .collect();
    (pairs, targets)
}

fn link_metrics(emb: &Matrix, pairs: &(Vec<(usize, usize)>, Vec<bool>)) -> Result<(f64, Option<f64>)> {
    if pairs.0.is_empty() {
        return Ok((f64::NAN, None));
    }
    let scores = link_scores(emb, &pairs.0)?;
    let acc = binary_accuracy(&scores, &pairs.1, 0.5)?;
    Ok((acc, auc(&scores, &pairs.1).ok()))
}

fn check_dims(g: &Graph, model: &ModelConfig) -> Result<()> {
    if model.layer_dims[0] != g.num_features() {
        return Err(Error::validation(format!(
            "input width {} but graph has {} features",
            model.layer_dims[0],
            g.num_features()
        )));
    }
    let out = *model.layer_dims.last().expect("validated");
    if model.task == Task::NodeClassification && out != g.num_classes() {
        return Err(Error::validation(format!(
            "output width {out} but graph has {} classes",
            g.num_classes()
        )));
    }
    Ok(())
}

/// Trains a fresh model on `g`. Deterministic in `train.seed`.
pub fn train(g: &Graph, model: &ModelConfig, train: &TrainConfig) -> Result<TrainOutcome> {
    model.validate()?;
    train.validate()?;
    check_dims(g, model)?;
    let params = ModelParams::init(model, train.seed)?;
    train_from(g, model, train, params)
}

/// Trains starting from the given parameters.
pub fn train_from(
    g: &Graph,
    model: &ModelConfig,
    train: &TrainConfig,
    mut params: ModelParams,
) -> Result<TrainOutcome> {
    model.validate()?;
    train.validate()?;
    check_dims(g, model)?;
    let started = Instant::now();
    let strategy = model.strategy;
    let flexidrop = strategy == DropoutStrategy::Flexidrop;

    let link = match model.task {
        Task::NodeClassification => None,
        Task::LinkPrediction => {
            let split = split_edges(g, train.edge_split[0], train.edge_split[1], train.seed)?;
            let val = labelled(&split.val_pos, &split.val_neg);
            let test = labelled(&split.test_pos, &split.test_neg);
            Some(LinkData {
                known: g.edges().iter().copied().collect(),
                split,
                val,
                test,
            })
        }
    };
    let graph = link.as_ref().map_or(g, |l| &l.split.train_graph);
    let prop = build_propagation(graph, model.propagation)?;

    let ctx = BoundContext::for_graph(
        graph,
        model.num_layers(),
        *model.layer_dims.last().expect("validated"),
        train.lambda,
    )?;
    let m = bound_constant(&ctx)?;
    let labels: Arc<[usize]> = Arc::from(g.labels());
    let hyper = train.adam();

    let mut weight_state: Vec<AdamState> = params
        .layers
        .iter()
        .map(|l| AdamState::new(l.weight.rows(), l.weight.cols()))
        .collect();
    let mut logit_state: Vec<AdamState> = params
        .layers
        .iter()
        .map(|l| AdamState::new(1, l.retention_logits.len()))
        .collect();

    let mut mask_rng = ChaCha8Rng::seed_from_u64(train.seed);
    mask_rng.set_stream(1);
    let mut neg_rng = ChaCha8Rng::seed_from_u64(train.seed);
    neg_rng.set_stream(2);

    let mut rows = Vec::new();
    let mut best: Option<BestVal> = None;
    for epoch in 1..=train.epochs {
        let diverged = |params: &ModelParams| Error::Diverged {
            epoch,
            last_good: Box::new(params.clone()),
        };
        let mut tape = Tape::new();
        let vars = params.attach(&mut tape, flexidrop);
        let out = match forward(&mut tape, graph, &prop, &vars, strategy, Mode::Train, &mut mask_rng) {
            Err(Error::NonFiniteLayer { .. }) => return Err(diverged(&params)),
            other => other?,
        };

        let (loss, train_pairs) = match &link {
            None => (tape.softmax_cross_entropy(out.logits, &labels, g.train_mask())?, None),
            Some(l) => {
                let neg = sample_non_edges(g.num_nodes(), &l.known, l.split.train_pos.len(), &mut neg_rng)?;
                let (pairs, targets) = labelled(&l.split.train_pos, &neg);
                let pairs: Arc<[(usize, usize)]> = Arc::from(pairs);
                let t: Arc<[f64]> = targets.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                let scores = tape.pair_dot(out.logits, &pairs)?;
                (tape.bce_with_logits(scores, &t)?, Some((pairs.to_vec(), targets)))
            }
        };

        let (reg_value, objective) = if flexidrop {
            let weights: Vec<Var> = vars.iter().map(|v| v.weight).collect();
            let ps = vars
                .iter()
                .map(|v| tape.sigmoid(v.retention_logits))
                .collect::<Result<Vec<_>>>()?;
            let r = regularizer(&mut tape, m, &weights, &ps)?;
            let value = tape.scalar(r)?;
            let obj = if train.lambda > 0.0 {
                let scaled = tape.scalar_mul(r, train.lambda)?;
                tape.add(loss, scaled)?
            } else {
                loss
            };
            (value, obj)
        } else {
            let retention = effective_retention(&params, strategy);
            (crate::bounds::network_bound_with(&ctx, &params, &retention)?, loss)
        };
        let loss_value = tape.scalar(loss)?;
        let objective_value = tape.scalar(objective)?;
        if !objective_value.is_finite() {
            return Err(diverged(&params));
        }

        let grads = tape.backward(objective)?;
        let mut next = params.clone();
        for (l, v) in vars.iter().enumerate() {
            if let Some(gw) = grads.get(v.weight) {
                adam_step(&mut next.layers[l].weight, gw, &mut weight_state[l], &hyper)?;
            }
            if flexidrop {
                if let Some(gz) = grads.get(v.retention_logits) {
                    adam_step(&mut next.layers[l].retention_logits, gz, &mut logit_state[l], &hyper)?;
                }
            }
        }
        if !next.all_finite() {
            return Err(diverged(&params));
        }
        params = next;

        if epoch % train.eval_every != 0 && epoch != train.epochs {
            continue;
        }
        let emb = match predict(graph, &prop, &params, strategy) {
            Err(Error::NonFiniteLayer { .. }) => return Err(diverged(&params)),
            other => other?,
        };
        let metrics = match &link {
            None => Metrics {
                train_acc: accuracy(emb.logits(), g.labels(), g.train_mask())?,
                val_acc: accuracy(emb.logits(), g.labels(), g.val_mask()).unwrap_or(f64::NAN),
                test_acc: accuracy(emb.logits(), g.labels(), g.test_mask()).unwrap_or(f64::NAN),
                test_auc: None,
            },
            Some(l) => {
                let train_pairs = train_pairs.expect("link task");
                let (train_acc, _) = link_metrics(emb.logits(), &train_pairs)?;
                let (val_acc, _) = link_metrics(emb.logits(), &l.val)?;
                let (test_acc, test_auc) = link_metrics(emb.logits(), &l.test)?;
                Metrics {
                    train_acc,
                    val_acc,
                    test_acc,
                    test_auc,
                }
            }
        };
        if best.is_none_or(|b| metrics.val_acc > b.val_acc) {
            best = Some(BestVal {
                epoch,
                val_acc: metrics.val_acc,
                test_acc: metrics.test_acc,
            });
        }
        rows.push(EpochRecord {
            epoch,
            loss: loss_value,
            regularizer: reg_value,
            objective: objective_value,
            metrics,
            retention: effective_retention(&params, strategy)
                .iter()
                .map(|p| RetentionStats::of(p))
                .collect(),
            elapsed_secs: started.elapsed().as_secs_f64(),
        });
    }

    Ok(TrainOutcome {
        record: RunRecord {
            task: model.task,
            strategy,
            lambda: train.lambda,
            seed: train.seed,
            final_metrics: rows.last().map(|r| r.metrics),
            best_val: best,
            epochs: rows,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
        params,
    })
}

/// Evaluates `params` on `g` in eval mode (node classification).
pub fn evaluate(g: &Graph, prop: &PropagationOperator, params: &ModelParams, strategy: DropoutStrategy) -> Result<Metrics> {
    let emb = predict(g, prop, params, strategy)?;
    Ok(Metrics {
        train_acc: accuracy(emb.logits(), g.labels(), g.train_mask())?,
        val_acc: accuracy(emb.logits(), g.labels(), g.val_mask()).unwrap_or(f64::NAN),
        test_acc: accuracy(emb.logits(), g.labels(), g.test_mask())?,
        test_auc: None,
    })
}
