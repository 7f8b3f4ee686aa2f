//! Seeded finite-difference suite covering every tape op plus the complete
//! two-layer flexidrop objective.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check, GradCheckReport, Tape, Var};
use crate::bounds::{bound_constant, regularizer, BoundContext};
use crate::error::Result;
use crate::graph::{build_propagation, Graph, PropagationMode};
use crate::model::{forward, DropoutStrategy, LayerVars, Mode};
use crate::tensor::{CsrMatrix, Matrix};

type Objective = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync>;

struct Case {
    name: &'static str,
    params: Vec<Matrix>,
    f: Objective,
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub name: &'static str,
    pub instance: u64,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub step: f64,
    pub tol: f64,
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.report.passed())
    }

    pub fn max_rel_error(&self) -> f64 {
        self.cases
            .iter()
            .map(|c| c.report.max_rel_error())
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&CaseResult> {
        self.cases.iter().filter(|c| !c.report.passed()).collect()
    }
}

/// Entries with magnitude in [0.1, 1] and random sign, away from relu kinks.
fn signed(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    let data = (0..r * c)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Matrix::from_vec(r, c, data).expect("sized")
}

fn positive(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    let data = (0..r * c).map(|_| rng.random_range(0.5..2.0)).collect();
    Matrix::from_vec(r, c, data).expect("sized")
}

/// `Σ out ⊙ weights`, turning any output into a scalar with a generic
/// upstream gradient.
fn project(t: &mut Tape, out: Var, weights: &Matrix) -> Result<Var> {
    let w = t.constant(weights.clone());
    let prod = t.mul(out, w)?;
    t.sum(prod)
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize, d: usize, classes: usize) -> Result<Graph> {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random::<f64>() < 0.5 {
                edges.push((u, v));
            }
        }
    }
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Graph::new(
        signed(rng, n, d),
        labels,
        classes,
        edges,
        [vec![true; n], vec![false; n], vec![false; n]],
    )
}

fn cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut out: Vec<Case> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($p:expr),*], $f:expr) => {
            out.push(Case { name: $name, params: vec![$($p),*], f: Box::new($f) })
        };
    }

    let (a, b, wp) = (signed(rng, 3, 4), signed(rng, 4, 2), signed(rng, 3, 2));
    case!("matmul", [a, b], move |t, p| {
        let y = t.matmul(p[0], p[1])?;
        project(t, y, &wp)
    });

    let sp = {
        let mut trip = Vec::new();
        for r in 0..4 {
            for c in 0..4 {
                if rng.random::<f64>() < 0.6 {
                    trip.push((r, c, rng.random_range(0.1..1.0)));
                }
            }
        }
        Arc::new(CsrMatrix::from_triplets(4, 4, trip)?)
    };
    let (x, wx) = (signed(rng, 4, 3), signed(rng, 4, 3));
    case!("spmm", [x], move |t, p| {
        let y = t.spmm(&sp, p[0])?;
        project(t, y, &wx)
    });

    for name in ["add", "sub", "mul"] {
        let (x, y, w) = (signed(rng, 2, 3), signed(rng, 2, 3), signed(rng, 2, 3));
        case!(name, [x, y], move |t, p| {
            let z = match name {
                "add" => t.add(p[0], p[1])?,
                "sub" => t.sub(p[0], p[1])?,
                _ => t.mul(p[0], p[1])?,
            };
            project(t, z, &w)
        });
    }

    let (x, v, w) = (signed(rng, 3, 4), positive(rng, 1, 4), signed(rng, 3, 4));
    case!("row_broadcast_mul", [x, v], move |t, p| {
        let y = t.row_broadcast_mul(p[0], p[1])?;
        project(t, y, &w)
    });

    let (x, v, w) = (signed(rng, 4, 2), positive(rng, 1, 4), signed(rng, 4, 2));
    case!("scale_rows", [x, v], move |t, p| {
        let y = t.scale_rows(p[0], p[1])?;
        project(t, y, &w)
    });

    for name in ["relu", "sigmoid", "exp", "log", "transpose"] {
        let x = if name == "log" { positive(rng, 3, 3) } else { signed(rng, 3, 3) };
        let w = signed(rng, 3, 3);
        case!(name, [x], move |t, p| {
            let y = match name {
                "relu" => t.relu(p[0])?,
                "sigmoid" => t.sigmoid(p[0])?,
                "exp" => t.exp(p[0])?,
                "log" => t.log(p[0])?,
                _ => t.transpose(p[0])?,
            };
            project(t, y, &w)
        });
    }

    case!("sum", [signed(rng, 2, 5)], |t, p| t.sum(p[0]));
    case!("mean", [signed(rng, 2, 5)], |t, p| t.mean(p[0]));
    let c = rng.random_range(-3.0..3.0);
    case!("scalar_mul", [signed(rng, 2, 2)], move |t, p| {
        let y = t.scalar_mul(p[0], c)?;
        t.sum(y)
    });

    let (x, w) = (signed(rng, 4, 3), signed(rng, 1, 3));
    case!("column_l2_norms", [x], move |t, p| {
        let y = t.column_l2_norms(p[0])?;
        project(t, y, &w)
    });
    case!("max_reduce", [signed(rng, 1, 6)], |t, p| t.max_reduce(p[0]));
    case!("product_reduce", [signed(rng, 1, 5)], |t, p| t.product_reduce(p[0]));

    let (x, y, z) = (signed(rng, 1, 1), signed(rng, 1, 1), signed(rng, 1, 1));
    let w = signed(rng, 1, 3);
    case!("stack", [x, y, z], move |t, p| {
        let s = t.stack(p)?;
        project(t, s, &w)
    });

    let labels: Arc<[usize]> = (0..5).map(|_| rng.random_range(0..3)).collect();
    let mask: Vec<bool> = (0..5).map(|i| i != 2).collect();
    let logits = signed(rng, 5, 3).scale(2.0);
    case!("softmax_cross_entropy", [logits], move |t, p| t.softmax_cross_entropy(p[0], &labels, &mask));

    let pairs: Arc<[(usize, usize)]> = Arc::from(vec![(0, 1), (2, 3), (1, 1), (3, 0)]);
    let w = signed(rng, 1, 4);
    let h = signed(rng, 4, 3);
    let pairs2 = Arc::clone(&pairs);
    case!("pair_dot", [h.clone()], move |t, p| {
        let d = t.pair_dot(p[0], &pairs2)?;
        project(t, d, &w)
    });
    let targets: Arc<[f64]> = Arc::from(vec![1.0, 0.0, 1.0, 0.0]);
    case!("bce_with_logits", [signed(rng, 1, 4).scale(3.0)], move |t, p| t.bce_with_logits(p[0], &targets));

    // Complete objective: 2-layer flexidrop GCN, cross-entropy + λ·R.
    let g = random_graph(rng, 6, 4, 3)?;
    let prop = build_propagation(&g, PropagationMode::RowStochastic)?;
    let ctx = BoundContext::for_graph(&g, 2, 3, 0.5)?;
    let m = bound_constant(&ctx)?;
    let labels: Arc<[usize]> = Arc::from(g.labels());
    let (w1, z1) = (signed(rng, 4, 5), signed(rng, 1, 4).scale(2.0));
    let (w2, z2) = (signed(rng, 5, 3), signed(rng, 1, 5).scale(2.0));
    case!("flexidrop_objective", [w1, z1, w2, z2], move |t, p| {
        let vars = [
            LayerVars { weight: p[0], retention_logits: p[1] },
            LayerVars { weight: p[2], retention_logits: p[3] },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = forward(t, &g, &prop, &vars, DropoutStrategy::Flexidrop, Mode::Train, &mut rng)?;
        let loss = t.softmax_cross_entropy(out.logits, &labels, g.train_mask())?;
        let p1 = t.sigmoid(p[1])?;
        let p2 = t.sigmoid(p[3])?;
        let r = regularizer(t, m, &[p[0], p[2]], &[p1, p2])?;
        let scaled = t.scalar_mul(r, 0.5)?;
        t.add(loss, scaled)
    });
    Ok(out)
}

/// Number of cases generated per instance.
pub fn case_names() -> Vec<&'static str> {
    cases(0).expect("fixed construction").iter().map(|c| c.name).collect()
}

/// Runs every case for `instances` seeds starting at `seed`.
pub fn run_suite(instances: u64, seed: u64, step: f64, tol: f64) -> Result<SuiteReport> {
    let mut results = Vec::new();
    for i in 0..instances {
        for case in cases(seed + i)? {
            let report = grad_check(&case.f, &case.params, step, tol)?;
            results.push(CaseResult {
                name: case.name,
                instance: seed + i,
                report,
            });
        }
    }
    Ok(SuiteReport {
        step,
        tol,
        cases: results,
    })
}
