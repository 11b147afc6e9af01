//! Experiment orchestration: balanced evaluation sets, transferability
//! matrices, surrogate sweeps and multi-model attack comparisons.

mod select;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attacks::{auto_saga, saga, AttackConfig, AttackKind, AttackReport};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::snn::SpikingNet;
use crate::surrogate::SurrogateSpec;
use crate::train::predict_all;

pub use select::{select_eval_set, EvalSet};

/// A named model reference.
pub type Named<'a> = (&'a str, &'a dyn Classifier);

/// Fraction of adversarial examples crafted on `source` that `target`
/// misclassifies, over `evalset`.
pub fn transferability(
    source: &dyn Classifier,
    target: &dyn Classifier,
    attack: AttackKind,
    cfg: &AttackConfig,
    data: &Dataset,
    evalset: &EvalSet,
) -> Result<f64> {
    Ok(transfer_detail(source, target, attack, cfg, data, evalset)?.rate)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferCell {
    pub attack: AttackKind,
    pub source: String,
    pub target: String,
    pub rate: f64,
    pub indices: Vec<usize>,
    /// Per sample: the target misclassifies the adversarial example.
    pub fooled: Vec<bool>,
}

fn transfer_detail(
    source: &dyn Classifier,
    target: &dyn Classifier,
    attack: AttackKind,
    cfg: &AttackConfig,
    data: &Dataset,
    evalset: &EvalSet,
) -> Result<TransferCell> {
    evalset.verify(&[source, target], data)?;
    let (x, y) = evalset.batch(data)?;
    let adv = attack.run(&[source], &x, &y, cfg)?;
    let preds = target.predict(&adv)?;
    let fooled: Vec<bool> = preds.iter().zip(&y).map(|(p, t)| p != t).collect();
    let rate = fooled.iter().filter(|&&f| f).count() as f64 / y.len() as f64;
    Ok(TransferCell {
        attack,
        source: String::new(),
        target: String::new(),
        rate,
        indices: evalset.indices.clone(),
        fooled,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub models: Vec<String>,
    pub n: usize,
    pub attacks: Vec<AttackKind>,
    /// `values[a][i][j]`: attack `a` crafted on model `i`, evaluated on `j`.
    pub values: Vec<Vec<Vec<f64>>>,
    /// Elementwise maximum over attacks.
    pub max: Vec<Vec<f64>>,
    pub cells: Vec<TransferCell>,
}

impl TransferMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("attack,source,target,transferability\n");
        let layers = self
            .attacks
            .iter()
            .map(|a| a.name())
            .zip(&self.values)
            .chain(std::iter::once(("max", &self.max)));
        for (name, grid) in layers {
            for (i, row) in grid.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    let _ = writeln!(out, "{name},{},{},{v:.6}", self.models[i], self.models[j]);
                }
            }
        }
        out
    }
}

/// All ordered pairs, each on its own evaluation set of `n` samples that
/// both models classify correctly.
pub fn transfer_matrix(
    models: &[Named<'_>],
    attacks: &[AttackKind],
    data: &Dataset,
    n: usize,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<TransferMatrix> {
    if models.is_empty() || attacks.is_empty() {
        return Err(Error::Config("transfer matrix needs models and attacks".into()));
    }
    let m = models.len();
    let mut values = vec![vec![vec![0.0; m]; m]; attacks.len()];
    let mut cells = Vec::new();
    for i in 0..m {
        for j in 0..m {
            let pair: Vec<&dyn Classifier> = if i == j {
                vec![models[i].1]
            } else {
                vec![models[i].1, models[j].1]
            };
            let evalset = select_eval_set(&pair, data, n, seed)?;
            for (a, &attack) in attacks.iter().enumerate() {
                let mut cell = transfer_detail(models[i].1, models[j].1, attack, cfg, data, &evalset)?;
                cell.source = models[i].0.to_string();
                cell.target = models[j].0.to_string();
                values[a][i][j] = cell.rate;
                cells.push(cell);
            }
        }
    }
    let max = (0..m)
        .map(|i| {
            (0..m)
                .map(|j| values.iter().map(|v| v[i][j]).fold(0.0, f64::max))
                .collect()
        })
        .collect();
    Ok(TransferMatrix {
        models: models.iter().map(|(n, _)| n.to_string()).collect(),
        n,
        attacks: attacks.to_vec(),
        values,
        max,
        cells,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub attack: AttackConfig,
    /// When set, each budget uses `ε_step = step_scale · ε / iterations`
    /// (capped at `ε`); otherwise `attack.eps_step` capped at `ε`.
    pub step_scale: Option<f32>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            attack: AttackConfig {
                iterations: 20,
                random_start: false,
                ..AttackConfig::default()
            },
            step_scale: None,
        }
    }
}

impl SweepConfig {
    fn at(&self, eps: f32) -> AttackConfig {
        let step = match self.step_scale {
            Some(s) => s * eps / self.attack.iterations as f32,
            None => self.attack.eps_step,
        };
        AttackConfig {
            eps,
            eps_step: step.min(eps),
            ..self.attack.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub surrogates: Vec<String>,
    pub eps: Vec<f32>,
    /// `robust_accuracy[s][e]`.
    pub robust_accuracy: Vec<Vec<f64>>,
    pub success_rate: Vec<Vec<f64>>,
    pub n: usize,
}

impl SweepGrid {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("surrogate,eps,robust_accuracy,success_rate\n");
        for (s, name) in self.surrogates.iter().enumerate() {
            for (e, eps) in self.eps.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{name},{eps},{:.6},{:.6}",
                    self.robust_accuracy[s][e], self.success_rate[s][e]
                );
            }
        }
        out
    }

    pub fn robust(&self, surrogate: &str, eps: f32) -> Option<f64> {
        let s = self.surrogates.iter().position(|n| n == surrogate)?;
        let e = self.eps.iter().position(|&v| v == eps)?;
        Some(self.robust_accuracy[s][e])
    }
}

/// White-box PGD against `snn` with each surrogate substituted in the
/// backward pass only. Every budget starts again from the clean inputs.
pub fn surrogate_sweep(
    snn: &SpikingNet,
    eps: &[f32],
    specs: &[SurrogateSpec],
    data: &Dataset,
    evalset: &EvalSet,
    cfg: &SweepConfig,
) -> Result<SweepGrid> {
    evalset.verify(&[snn], data)?;
    let (x, y) = evalset.batch(data)?;
    let mut robust = Vec::with_capacity(specs.len());
    for spec in specs {
        spec.validate()?;
        let mut probe = snn.clone();
        probe.surrogate = *spec;
        let mut row = Vec::with_capacity(eps.len());
        for &e in eps {
            let adv = AttackKind::Pgd.run(&[&probe], &x, &y, &cfg.at(e))?;
            // forward is unchanged, so either copy scores the same
            let preds = snn.predict(&adv)?;
            let correct = preds.iter().zip(&y).filter(|(p, t)| p == t).count();
            row.push(correct as f64 / y.len() as f64);
        }
        robust.push(row);
    }
    let success_rate = robust.iter().map(|r| r.iter().map(|a| 1.0 - a).collect()).collect();
    Ok(SweepGrid {
        surrogates: specs.iter().map(|s| s.kind.name().to_string()).collect(),
        eps: eps.to_vec(),
        robust_accuracy: robust,
        success_rate,
        n: y.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub pair: [String; 2],
    pub n: usize,
    /// Best joint success of MIM crafted on either model alone.
    pub max_mim: f64,
    pub max_pgd: f64,
    /// SAGA with coefficients `[0.5, 0.5]`.
    pub basic_saga: f64,
    pub auto_saga: f64,
    /// Mean final Auto-SAGA coefficients over the samples.
    pub auto_saga_alpha: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model_a,model_b,n,max_mim,max_pgd,basic_saga,auto_saga\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6},{:.6}",
                r.pair[0], r.pair[1], r.n, r.max_mim, r.max_pgd, r.basic_saga, r.auto_saga
            );
        }
        out
    }
}

fn joint(models: &[&dyn Classifier], x: &crate::numerics::Tensor, adv: &crate::numerics::Tensor, y: &[usize], iters: usize) -> Result<f64> {
    let names: Vec<String> = (0..models.len()).map(|i| i.to_string()).collect();
    Ok(AttackReport::evaluate(models, &names, x, adv, y, iters)?.joint_success_rate)
}

/// Joint success of the single-model attacks (best over the source model),
/// Basic SAGA and Auto-SAGA on one pair and one evaluation set.
pub fn compare_pair(a: Named<'_>, b: Named<'_>, data: &Dataset, evalset: &EvalSet, cfg: &AttackConfig) -> Result<ComparisonRow> {
    let both = [a.1, b.1];
    evalset.verify(&both, data)?;
    let (x, y) = evalset.batch(data)?;
    let iters = cfg.iterations;
    let best = |kind: AttackKind| -> Result<f64> {
        let mut top: f64 = 0.0;
        for src in both {
            let adv = kind.run(&[src], &x, &y, cfg)?;
            top = top.max(joint(&both, &x, &adv, &y, iters)?);
        }
        Ok(top)
    };
    let max_mim = best(AttackKind::Mim)?;
    let max_pgd = best(AttackKind::Pgd)?;
    let basic = saga(&both, &[0.5, 0.5], &x, &y, cfg)?;
    let basic_saga = joint(&both, &x, &basic, &y, iters)?;
    let auto = auto_saga(&both, &x, &y, cfg)?;
    let auto_saga_rate = joint(&both, &x, &auto.x_adv, &y, iters)?;
    let mut mean = [0.0f64; 2];
    for hist in &auto.alpha {
        let last = hist.last().expect("history has the initial coefficients");
        for (m, &v) in mean.iter_mut().zip(last) {
            *m += f64::from(v);
        }
    }
    let mean = mean.iter().map(|m| (m / auto.alpha.len() as f64) as f32).collect();
    Ok(ComparisonRow {
        pair: [a.0.to_string(), b.0.to_string()],
        n: y.len(),
        max_mim,
        max_pgd,
        basic_saga,
        auto_saga: auto_saga_rate,
        auto_saga_alpha: mean,
    })
}

/// [`compare_pair`] over several pairs, each with its own evaluation set.
pub fn multi_model_comparison(
    pairs: &[(Named<'_>, Named<'_>)],
    data: &Dataset,
    n: usize,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<ComparisonTable> {
    let mut rows = Vec::with_capacity(pairs.len());
    for &(a, b) in pairs {
        let evalset = select_eval_set(&[a.1, b.1], data, n, seed)?;
        rows.push(compare_pair(a, b, data, &evalset, cfg)?);
    }
    Ok(ComparisonTable { rows })
}

/// Clean accuracy of each model on `data`.
pub fn clean_accuracy(model: &dyn Classifier, data: &Dataset) -> Result<f64> {
    let preds = predict_all(model, data)?;
    Ok(preds.iter().zip(&data.labels).filter(|(p, t)| p == t).count() as f64 / data.len().max(1) as f64)
}
