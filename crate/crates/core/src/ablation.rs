//! Grids of pretraining objectives and alignment fractions, each pretrained
//! from a fresh seeded init and evaluated with the shared few-shot protocol.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::probe::{collapse_diagnostic, extract_features, few_shot_eval, CollapseDiagnostic, EvalConfig, ProbeReport};
use crate::train::{pretrain, RunOptions, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Objective {
    pub name: String,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Objective {
    pub fn new(name: &str, alpha: f64, beta: f64, gamma: f64) -> Self {
        Self {
            name: name.into(),
            alpha,
            beta,
            gamma,
        }
    }

    /// Name built from the active terms, e.g. `SS+NN`; all three is `PRIMUS`.
    pub fn from_weights(alpha: f64, beta: f64, gamma: f64) -> Self {
        let terms: Vec<&str> = [("SS", alpha), ("MM", beta), ("NN", gamma)]
            .iter()
            .filter(|(_, w)| *w > 0.0)
            .map(|(n, _)| *n)
            .collect();
        let name = if terms.len() == 3 { "PRIMUS".to_string() } else { terms.join("+") };
        Self::new(&name, alpha, beta, gamma)
    }

    fn weights(&self) -> [u64; 3] {
        [self.alpha.to_bits(), self.beta.to_bits(), self.gamma.to_bits()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentGrid {
    pub objectives: Vec<Objective>,
    #[serde(default = "full_alignment")]
    pub aligned_fractions: Vec<f64>,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn full_alignment() -> Vec<f64> {
    vec![1.0]
}

pub const PRESETS: [&str; 2] = ["fig4", "fig5"];

impl ExperimentGrid {
    /// Named grids: `fig4` compares objectives at full alignment, `fig5`
    /// sweeps the aligned fraction under the full objective.
    pub fn preset(name: &str, eval: EvalConfig) -> Result<Self> {
        let objectives = match name {
            "fig4" => [(1., 0., 0.), (0., 1., 0.), (1., 1., 0.), (1., 0., 1.), (0., 1., 1.), (1., 1., 1.)]
                .iter()
                .map(|&(a, b, g)| Objective::from_weights(a, b, g))
                .collect(),
            "fig5" => vec![Objective::from_weights(1.0, 1.0, 1.0)],
            other => {
                return Err(Error::config(
                    "preset",
                    format!("unknown preset {other:?}; available: {}", PRESETS.join(", ")),
                ))
            }
        };
        let aligned_fractions = if name == "fig5" { vec![0.01, 0.1, 0.5, 1.0] } else { full_alignment() };
        Ok(Self {
            objectives,
            aligned_fractions,
            eval,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.objectives.is_empty() || self.aligned_fractions.is_empty() {
            return Err(Error::config("grid", "needs at least one objective and one aligned fraction"));
        }
        for (i, o) in self.objectives.iter().enumerate() {
            LossConfig::with_weights(o.alpha, o.beta, o.gamma).validate()?;
            if self.objectives[..i].iter().any(|p| p.weights() == o.weights() || p.name == o.name) {
                return Err(Error::config("grid", format!("objective {:?} listed twice", o.name)));
            }
        }
        for (i, f) in self.aligned_fractions.iter().enumerate() {
            if !(0.0..=1.0).contains(f) {
                return Err(Error::config("aligned_fractions", "must lie in [0, 1]"));
            }
            if self.aligned_fractions[..i].iter().any(|p| p.to_bits() == f.to_bits()) {
                return Err(Error::config("aligned_fractions", format!("{f} listed twice")));
            }
        }
        self.eval.validate()
    }

    /// Every (objective, aligned fraction) pair in objective-major order.
    pub fn runs(&self) -> Vec<(Objective, f64)> {
        self.objectives
            .iter()
            .flat_map(|o| self.aligned_fractions.iter().map(move |&f| (o.clone(), f)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub objective: Objective,
    pub aligned_fraction: f64,
    pub reports: Vec<ProbeReport>,
    pub diagnostic: Option<CollapseDiagnostic>,
    /// Mean total loss over the first and last epoch.
    pub first_epoch_loss: Option<f64>,
    pub last_epoch_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub runs: Vec<AblationRun>,
}

impl AblationTable {
    /// Every report of every successful run, in grid order.
    pub fn reports(&self) -> Vec<ProbeReport> {
        self.runs.iter().flat_map(|r| r.reports.iter().cloned()).collect()
    }

    pub fn find(&self, objective: &str, aligned_fraction: f64) -> Option<&AblationRun> {
        self.runs
            .iter()
            .find(|r| r.objective.name == objective && r.aligned_fraction == aligned_fraction)
    }
}

fn epoch_mean(log: &[crate::train::StepRecord], epoch: usize) -> Option<f64> {
    let v: Vec<f64> = log.iter().filter(|r| r.epoch == epoch).map(|r| r.total).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Pretrains and evaluates one grid cell.
pub fn run_one(dataset: &Dataset, objective: &Objective, fraction: f64, base: &TrainConfig, eval: &EvalConfig) -> Result<AblationRun> {
    let cfg = TrainConfig {
        loss: LossConfig {
            alpha: objective.alpha,
            beta: objective.beta,
            gamma: objective.gamma,
            ..base.loss.clone()
        },
        aligned_fraction: fraction,
        ..base.clone()
    };
    let out = pretrain(dataset, &cfg, &RunOptions::default())?;
    let reports = few_shot_eval(&out.params, dataset, eval, &objective.name, fraction)?;
    let (features, _) = extract_features(&out.params, dataset)?;
    let best = reports
        .iter()
        .max_by_key(|r| r.n_per_class)
        .map_or(0.0, |r| r.mean);
    let diagnostic = collapse_diagnostic(&features, best, dataset.n_classes())?;
    let last = out.log.last().map(|r| r.epoch);
    Ok(AblationRun {
        objective: objective.clone(),
        aligned_fraction: fraction,
        reports,
        diagnostic: Some(diagnostic),
        first_epoch_loss: epoch_mean(&out.log, 0),
        last_epoch_loss: last.and_then(|e| epoch_mean(&out.log, e)),
        error: None,
    })
}

/// Runs every grid cell; a failing cell is recorded with its error and the
/// grid continues.
pub fn run_ablation(dataset: &Dataset, grid: &ExperimentGrid, base: &TrainConfig) -> Result<AblationTable> {
    grid.validate()?;
    let mut table = AblationTable::default();
    for (objective, fraction) in grid.runs() {
        log::info!("ablation run {} at aligned fraction {fraction}", objective.name);
        let run = run_one(dataset, &objective, fraction, base, &grid.eval).unwrap_or_else(|e| {
            log::warn!("run {} / {fraction} failed: {e}", objective.name);
            AblationRun {
                objective: objective.clone(),
                aligned_fraction: fraction,
                reports: Vec::new(),
                diagnostic: None,
                first_epoch_loss: None,
                last_epoch_loss: None,
                error: Some(e.to_string()),
            }
        });
        table.runs.push(run);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_from_weights() {
        assert_eq!(Objective::from_weights(1.0, 0.0, 1.0).name, "SS+NN");
        assert_eq!(Objective::from_weights(1.0, 1.0, 1.0).name, "PRIMUS");
        assert_eq!(Objective::from_weights(0.0, 2.0, 0.0).name, "MM");
    }

    #[test]
    fn presets_expand() {
        let g = ExperimentGrid::preset("fig4", EvalConfig::default()).unwrap();
        assert_eq!(g.runs().len(), 6);
        let g = ExperimentGrid::preset("fig5", EvalConfig::default()).unwrap();
        assert_eq!(g.runs().len(), 4);
        assert!(ExperimentGrid::preset("fig9", EvalConfig::default()).is_err());
    }

    #[test]
    fn empty_and_duplicate_grids_rejected() {
        let mut g = ExperimentGrid::preset("fig4", EvalConfig::default()).unwrap();
        g.objectives.push(Objective::new("again", 1.0, 0.0, 0.0));
        assert!(g.validate().is_err());
        g.objectives.clear();
        assert!(matches!(g.validate(), Err(Error::Config { .. })));
    }
}
