//! Multi-run sweeps: rate grids, depth profiles and edge-injection
//! robustness. Cells run in parallel and are reported in a fixed order, so
//! the CSV output depends only on the inputs.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_propagation, inject_random_edges, Graph};
use crate::metrics::{mean_std, EnergyProfile};
use crate::model::{predict, DropoutStrategy, ModelConfig};
use crate::train::{train, BestVal, Metrics, TrainConfig};

/// A strategy together with the regularization weight it is trained with.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub strategy: DropoutStrategy,
    pub lambda: f64,
}

impl Variant {
    pub fn label(&self) -> String {
        match (self.strategy, self.strategy.rate()) {
            (DropoutStrategy::Flexidrop, _) => format!("flexidrop:{}", self.lambda),
            (s, Some(r)) => format!("{}:{r}", s.name()),
            (s, None) => s.name().to_string(),
        }
    }

    fn rate_field(&self) -> String {
        self.strategy.rate().map(|r| r.to_string()).unwrap_or_default()
    }

    fn lambda_field(&self) -> String {
        if self.strategy == DropoutStrategy::Flexidrop {
            self.lambda.to_string()
        } else {
            String::new()
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// `none`, `flexidrop[:λ]` (λ defaults to 0.5), or `<kind>:<rate>` for
    /// `fixed_dropout`, `dropnode` and `dropedge`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => {
                let v: f64 = a
                    .parse()
                    .map_err(|_| Error::validation(format!("bad number in variant {s:?}")))?;
                (n, Some(v))
            }
            None => (s, None),
        };
        let default_lambda = TrainConfig::default().lambda;
        match name {
            "flexidrop" => Ok(Variant {
                strategy: DropoutStrategy::Flexidrop,
                lambda: arg.unwrap_or(default_lambda),
            }),
            "none" if arg.is_none() => Ok(Variant {
                strategy: DropoutStrategy::None,
                lambda: default_lambda,
            }),
            "none" => Err(Error::validation("strategy none takes no argument")),
            other => {
                let rate = arg.ok_or_else(|| Error::validation(format!("{other} needs a rate, e.g. {other}:0.5")))?;
                Ok(Variant {
                    strategy: DropoutStrategy::from_name(other, rate)?,
                    lambda: default_lambda,
                })
            }
        }
    }
}

fn run_one(g: &Graph, model: &ModelConfig, base: &TrainConfig, v: Variant, seed: u64) -> Result<(Metrics, BestVal)> {
    let model = ModelConfig {
        strategy: v.strategy,
        ..model.clone()
    };
    let cfg = TrainConfig {
        seed,
        lambda: v.lambda,
        ..base.clone()
    };
    let rec = train(g, &model, &cfg)?.record;
    let m = rec
        .final_metrics
        .ok_or_else(|| Error::validation("run logged no epochs"))?;
    let b = rec.best_val.expect("logged epochs have a best entry");
    Ok((m, b))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Expands strategy names into variants: `none` once, `flexidrop` once per
/// λ, fixed-rate kinds once per rate.
pub fn grid_variants(strategies: &[String], rates: &[f64], lambdas: &[f64]) -> Result<Vec<Variant>> {
    let mut out = Vec::new();
    for s in strategies {
        match s.as_str() {
            "none" => out.push("none".parse()?),
            "flexidrop" => {
                if lambdas.is_empty() {
                    return Err(Error::validation("flexidrop sweep needs at least one lambda"));
                }
                out.extend(lambdas.iter().map(|&l| Variant {
                    strategy: DropoutStrategy::Flexidrop,
                    lambda: l,
                }))
            }
            kind => {
                if rates.is_empty() {
                    return Err(Error::validation(format!("{kind} sweep needs at least one rate")));
                }
                for &r in rates {
                    out.push(Variant {
                        strategy: DropoutStrategy::from_name(kind, r)?,
                        lambda: TrainConfig::default().lambda,
                    });
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct GridRun {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: Option<Metrics>,
    pub best_val: Option<BestVal>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GridRow {
    pub variant: Variant,
    pub runs: usize,
    pub failures: usize,
    pub val_mean: f64,
    pub val_std: f64,
    pub test_mean: f64,
    pub test_std: f64,
    pub best_val_test_mean: f64,
    pub best_val_test_std: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GridTable {
    pub runs: Vec<GridRun>,
    pub rows: Vec<GridRow>,
}

impl GridTable {
    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "strategy,rate,lambda,runs,failures,val_mean,val_std,test_mean,test_std,best_val_test_mean,best_val_test_std\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.variant.strategy.name(),
                r.variant.rate_field(),
                r.variant.lambda_field(),
                r.runs,
                r.failures,
                r.val_mean,
                r.val_std,
                r.test_mean,
                r.test_std,
                r.best_val_test_mean,
                r.best_val_test_std
            );
        }
        out
    }

    pub fn runs_csv(&self) -> String {
        let mut out = String::from("strategy,rate,lambda,seed,status,train_acc,val_acc,test_acc,best_epoch,best_val_acc,best_val_test_acc\n");
        for r in &self.runs {
            let status = r.error.as_deref().map_or("ok".to_string(), |e| csv_escape(&format!("error: {e}")));
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.variant.strategy.name(),
                r.variant.rate_field(),
                r.variant.lambda_field(),
                r.seed,
                status,
                fmt_opt(r.metrics.map(|m| m.train_acc)),
                fmt_opt(r.metrics.map(|m| m.val_acc)),
                fmt_opt(r.metrics.map(|m| m.test_acc)),
                r.best_val.map(|b| b.epoch.to_string()).unwrap_or_default(),
                fmt_opt(r.best_val.map(|b| b.val_acc)),
                fmt_opt(r.best_val.map(|b| b.test_acc)),
            );
        }
        out
    }

    pub fn row(&self, label: &str) -> Option<&GridRow> {
        self.rows.iter().find(|r| r.variant.label() == label)
    }

    /// Row with the highest mean validation accuracy among `kind` rows;
    /// ties keep the first.
    pub fn best_by_val(&self, kind: &str) -> Option<&GridRow> {
        self.rows
            .iter()
            .filter(|r| r.variant.strategy.name() == kind && r.failures < r.runs)
            .fold(None, |best: Option<&GridRow>, r| match best {
                Some(b) if b.val_mean >= r.val_mean => Some(b),
                _ => Some(r),
            })
    }
}

/// Trains every variant with every seed. Failed runs are recorded and the
/// sweep continues.
pub fn grid_search(
    g: &Graph,
    model: &ModelConfig,
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<GridTable> {
    if seeds.is_empty() {
        return Err(Error::validation("grid needs at least one seed"));
    }
    let cells: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let runs: Vec<GridRun> = cells
        .par_iter()
        .map(|&(variant, seed)| match run_one(g, model, base, variant, seed) {
            Ok((m, b)) => GridRun {
                variant,
                seed,
                metrics: Some(m),
                best_val: Some(b),
                error: None,
            },
            Err(e) => {
                log::warn!("run {} seed {seed} failed: {e}", variant.label());
                GridRun {
                    variant,
                    seed,
                    metrics: None,
                    best_val: None,
                    error: Some(e.to_string()),
                }
            }
        })
        .collect();
    let rows = variants
        .iter()
        .map(|v| {
            let mine: Vec<&GridRun> = runs.iter().filter(|r| r.variant == *v).collect();
            let ok: Vec<(Metrics, BestVal)> = mine
                .iter()
                .filter_map(|r| r.metrics.zip(r.best_val))
                .collect();
            let (val_mean, val_std) = mean_std(&ok.iter().map(|(m, _)| m.val_acc).collect::<Vec<_>>());
            let (test_mean, test_std) = mean_std(&ok.iter().map(|(m, _)| m.test_acc).collect::<Vec<_>>());
            let (bt_mean, bt_std) = mean_std(&ok.iter().map(|(_, b)| b.test_acc).collect::<Vec<_>>());
            GridRow {
                variant: *v,
                runs: mine.len(),
                failures: mine.len() - ok.len(),
                val_mean,
                val_std,
                test_mean,
                test_std,
                best_val_test_mean: bt_mean,
                best_val_test_std: bt_std,
            }
        })
        .collect();
    Ok(GridTable { runs, rows })
}

/// `[d, hidden × (depth − 1), out]`.
pub fn deep_dims(input: usize, hidden: usize, output: usize, depth: usize) -> Result<Vec<usize>> {
    if depth == 0 {
        return Err(Error::validation("depth must be at least 1"));
    }
    let mut dims = vec![input];
    dims.extend(std::iter::repeat_n(hidden, depth - 1));
    dims.push(output);
    Ok(dims)
}

#[derive(Clone, Debug, Serialize)]
pub struct DepthRow {
    pub depth: usize,
    pub variant: Variant,
    pub seed: u64,
    pub test_acc: Option<f64>,
    /// Eval-mode Dirichlet energy of each layer's pre-activation output.
    pub energies: Option<Vec<f64>>,
    pub error: Option<String>,
}

impl DepthRow {
    pub fn final_energy(&self) -> Option<f64> {
        self.energies.as_ref().and_then(|e| e.last().copied())
    }
}

pub fn depth_csv(rows: &[DepthRow]) -> String {
    let mut out = String::from("depth,strategy,rate,lambda,seed,status,test_acc,first_layer_energy,final_energy\n");
    for r in rows {
        let status = r.error.as_deref().map_or("ok".to_string(), |e| csv_escape(&format!("error: {e}")));
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.depth,
            r.variant.strategy.name(),
            r.variant.rate_field(),
            r.variant.lambda_field(),
            r.seed,
            status,
            fmt_opt(r.test_acc),
            fmt_opt(r.energies.as_ref().and_then(|e| e.first().copied())),
            fmt_opt(r.final_energy()),
        );
    }
    out
}

/// Trains a fresh model for every (depth, variant, seed) and measures test
/// accuracy and per-layer energies on the trained model.
pub fn oversmoothing_profile(
    g: &Graph,
    model: &ModelConfig,
    hidden: usize,
    base: &TrainConfig,
    depths: &[usize],
    variants: &[Variant],
    seeds: &[u64],
) -> Result<Vec<DepthRow>> {
    let output = *model.layer_dims.last().expect("validated config");
    let mut cells = Vec::new();
    for &d in depths {
        deep_dims(g.num_features(), hidden, output, d)?;
        for &v in variants {
            for &s in seeds {
                cells.push((d, v, s));
            }
        }
    }
    let prop = build_propagation(g, model.propagation)?;
    Ok(cells
        .par_iter()
        .map(|&(depth, variant, seed)| {
            let res = (|| -> Result<(f64, Vec<f64>)> {
                let cfg = ModelConfig {
                    layer_dims: deep_dims(g.num_features(), hidden, output, depth)?,
                    strategy: variant.strategy,
                    ..model.clone()
                };
                let tc = TrainConfig {
                    seed,
                    lambda: variant.lambda,
                    ..base.clone()
                };
                let out = train(g, &cfg, &tc)?;
                let test = out
                    .record
                    .final_metrics
                    .ok_or_else(|| Error::validation("run logged no epochs"))?
                    .test_acc;
                let emb = predict(g, &prop, &out.params, variant.strategy)?;
                Ok((test, EnergyProfile::of(&emb, g)?.energies))
            })();
            match res {
                Ok((acc, energies)) => DepthRow {
                    depth,
                    variant,
                    seed,
                    test_acc: Some(acc),
                    energies: Some(energies),
                    error: None,
                },
                Err(e) => DepthRow {
                    depth,
                    variant,
                    seed,
                    test_acc: None,
                    energies: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct RobustnessRow {
    pub fraction: f64,
    pub injected_edges: usize,
    pub variant: Variant,
    pub seed: u64,
    pub test_acc: Option<f64>,
    pub error: Option<String>,
}

pub fn robustness_csv(rows: &[RobustnessRow]) -> String {
    let mut out = String::from("fraction,injected_edges,strategy,rate,lambda,seed,status,test_acc\n");
    for r in rows {
        let status = r.error.as_deref().map_or("ok".to_string(), |e| csv_escape(&format!("error: {e}")));
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.fraction,
            r.injected_edges,
            r.variant.strategy.name(),
            r.variant.rate_field(),
            r.variant.lambda_field(),
            r.seed,
            status,
            fmt_opt(r.test_acc)
        );
    }
    out
}

/// For each fraction (a clean `0` baseline is always included), injects
/// `⌊f·|E|⌋` random edges with the run's seed, retrains, and evaluates on the
/// unchanged test mask.
pub fn robustness_sweep(
    g: &Graph,
    model: &ModelConfig,
    base: &TrainConfig,
    fractions: &[f64],
    variants: &[Variant],
    seeds: &[u64],
) -> Result<Vec<RobustnessRow>> {
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 2.0)) {
        return Err(Error::validation(format!("injection fraction {f} outside (0, 2]")));
    }
    let mut all = vec![0.0];
    all.extend_from_slice(fractions);
    let mut cells = Vec::new();
    for &f in &all {
        for &v in variants {
            for &s in seeds {
                cells.push((f, v, s));
            }
        }
    }
    Ok(cells
        .par_iter()
        .map(|&(fraction, variant, seed)| {
            let injected = (fraction * g.num_edges() as f64).floor() as usize;
            let res = (|| -> Result<f64> {
                let attacked = if fraction == 0.0 {
                    g.clone()
                } else {
                    inject_random_edges(g, fraction, seed)?
                };
                Ok(run_one(&attacked, model, base, variant, seed)?.0.test_acc)
            })();
            RobustnessRow {
                fraction,
                injected_edges: injected,
                variant,
                seed,
                test_acc: res.as_ref().ok().copied(),
                error: res.err().map(|e| e.to_string()),
            }
        })
        .collect())
}

/// Mean test accuracy of `variant` at `fraction` over successful runs.
pub fn mean_accuracy_at(rows: &[RobustnessRow], variant: &Variant, fraction: f64) -> Option<f64> {
    let accs: Vec<f64> = rows
        .iter()
        .filter(|r| r.variant == *variant && r.fraction == fraction)
        .filter_map(|r| r.test_acc)
        .collect();
    (!accs.is_empty()).then(|| mean_std(&accs).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_sbm, SbmConfig};

    fn setup() -> (Graph, ModelConfig, TrainConfig) {
        let g = generate_sbm(&SbmConfig::default()).unwrap();
        let m = ModelConfig::new(vec![16, 8, 2], DropoutStrategy::None);
        let t = TrainConfig {
            epochs: 8,
            eval_every: 4,
            ..TrainConfig::default()
        };
        (g, m, t)
    }

    #[test]
    fn variant_parsing() {
        let v: Variant = "flexidrop:0.01".parse().unwrap();
        assert_eq!(v.strategy, DropoutStrategy::Flexidrop);
        assert_eq!(v.lambda, 0.01);
        assert_eq!("flexidrop".parse::<Variant>().unwrap().lambda, 0.5);
        assert_eq!("dropnode:0.3".parse::<Variant>().unwrap().strategy, DropoutStrategy::DropNode(0.3));
        assert!("dropout".parse::<Variant>().is_err());
        assert!("dropout:1.0".parse::<Variant>().is_err());
        assert!("none:0.1".parse::<Variant>().is_err());
        assert_eq!("fixed_dropout:0.5".parse::<Variant>().unwrap().label(), "fixed_dropout:0.5");
    }

    #[test]
    fn rate_zero_matches_none() {
        let (g, m, t) = setup();
        let vs = grid_variants(&["none".into(), "fixed_dropout".into()], &[0.0], &[]).unwrap();
        let table = grid_search(&g, &m, &t, &vs, &[1, 2]).unwrap();
        assert_eq!(table.rows[0].test_mean, table.rows[1].test_mean);
        assert_eq!(table.rows[0].runs, 2);
    }

    #[test]
    fn failures_are_recorded() {
        let (g, _, t) = setup();
        let bad = ModelConfig::new(vec![16, 8, 5], DropoutStrategy::None);
        let vs = grid_variants(&["none".into()], &[], &[]).unwrap();
        let table = grid_search(&g, &bad, &t, &vs, &[1]).unwrap();
        assert_eq!(table.rows[0].failures, 1);
        assert!(table.runs_csv().contains("error:"));
    }

    #[test]
    fn robustness_includes_clean_baseline() {
        let (g, m, t) = setup();
        let v: Variant = "none".parse().unwrap();
        let rows = robustness_sweep(&g, &m, &t, &[0.5], &[v], &[4]).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].fraction, 0.0);
        assert_eq!(rows[1].injected_edges, g.num_edges() / 2);
        let clean = run_one(&g, &m, &t, v, 4).unwrap().0.test_acc;
        assert_eq!(rows[0].test_acc, Some(clean));
        assert!(robustness_sweep(&g, &m, &t, &[2.5], &[v], &[4]).is_err());
    }

    #[test]
    fn depth_rows_cover_every_cell() {
        let (g, m, t) = setup();
        let vs: Vec<Variant> = vec!["none".parse().unwrap(), "flexidrop".parse().unwrap()];
        let rows = oversmoothing_profile(&g, &m, 8, &t, &[2, 3], &vs, &[0]).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.error.is_none()));
        assert_eq!(rows[2].energies.as_ref().unwrap().len(), 3);
        assert!(depth_csv(&rows).starts_with("depth,"));
    }
}
