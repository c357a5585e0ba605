//! End-to-end runs, label-count sweeps and component ablations.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Method, RunConfig, UnsupLoss};
use crate::data::{generate, split, SslSplit};
use crate::error::Result;
use crate::metrics::Metrics;
use crate::model::{LeafModel, ModelSpec};
use crate::nn::ParamStore;
use crate::train::{evaluate, train, TrainOutput};

/// Builds the dataset and split a config describes. Both derive from the
/// config seed.
pub fn prepare_split(config: &RunConfig) -> Result<SslSplit> {
    config.validate()?;
    let dataset = generate(&config.synthetic_spec())?;
    split(
        &dataset,
        config.n_labeled,
        config.test_fraction,
        crate::config::stream_seed(config.seed, crate::config::RngStream::Split),
    )
}

pub fn run_experiment(config: &RunConfig) -> Result<TrainOutput> {
    let split = prepare_split(config)?;
    train(config, &split)
}

/// Rebuilds the model a config describes, loads `checkpoint` into it and
/// scores it on the config's test split.
pub fn evaluate_checkpoint(config: &RunConfig, checkpoint: impl AsRef<Path>) -> Result<Metrics> {
    let split = prepare_split(config)?;
    let saved = ParamStore::load(checkpoint)?;
    let mut store = ParamStore::new();
    // Initial values are irrelevant; they are overwritten from the file.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = LeafModel::new(&ModelSpec::from_config(config), &mut store, &mut rng)?;
    store.load_values_from(&saved)?;
    evaluate(&model, &store, &split.test_x, &split.test_y)
}

/// One summary CSV row: method, seed, n_labeled, overall_acc, balanced_acc.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub seed: u64,
    pub n_labeled: usize,
    pub overall_acc: f64,
    pub balanced_acc: f64,
}

impl SummaryRow {
    pub const HEADER: &'static str = "method,seed,n_labeled,overall_acc,balanced_acc";

    pub fn new(config: &RunConfig, output: &TrainOutput) -> Self {
        Self {
            method: config.method.to_string(),
            seed: config.seed,
            n_labeled: config.n_labeled,
            overall_acc: output.final_metrics.overall_accuracy,
            balanced_acc: output.final_metrics.balanced_accuracy,
        }
    }

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.method, self.seed, self.n_labeled, self.overall_acc, self.balanced_acc
        )
    }
}

/// Reads a summary CSV written by a run (header plus rows).
pub fn read_summary_csv(path: impl AsRef<Path>) -> Result<Vec<SummaryRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for row in reader.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

/// Groups summary rows by (n_labeled, method), ordered by label count and
/// then method name.
pub fn aggregate(rows: &[SummaryRow]) -> Vec<SweepCell> {
    let mut groups: BTreeMap<(usize, &str), Vec<&SummaryRow>> = BTreeMap::new();
    for row in rows {
        groups.entry((row.n_labeled, row.method.as_str())).or_default().push(row);
    }
    groups
        .into_iter()
        .map(|((n_labeled, method), group)| {
            let bal: Vec<f64> = group.iter().map(|r| r.balanced_acc).collect();
            let overall: Vec<f64> = group.iter().map(|r| r.overall_acc).collect();
            let (mean_b, std_b) = mean_std(&bal);
            SweepCell {
                n_labeled,
                method: method.to_string(),
                runs: group.len(),
                failures: 0,
                mean_balanced_acc: mean_b,
                std_balanced_acc: std_b,
                mean_overall_acc: mean_std(&overall).0,
            }
        })
        .collect()
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Outcome of one (label count, method, seed) run.
#[derive(Debug, Clone)]
pub struct CellRun {
    pub n_labeled: usize,
    pub method: Method,
    pub seed: u64,
    pub result: std::result::Result<SummaryRow, String>,
}

/// Aggregate of one (label count, method) cell over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub n_labeled: usize,
    pub method: String,
    pub runs: usize,
    pub failures: usize,
    pub mean_balanced_acc: f64,
    pub std_balanced_acc: f64,
    pub mean_overall_acc: f64,
}

impl SweepCell {
    pub const HEADER: &'static str =
        "n_labeled,method,runs,failures,mean_balanced_acc,std_balanced_acc,mean_overall_acc";

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.n_labeled,
            self.method,
            self.runs,
            self.failures,
            self.mean_balanced_acc,
            self.std_balanced_acc,
            self.mean_overall_acc
        )
    }
}

/// Runs every (label count, method, seed) combination. Individual failures
/// are recorded in the returned runs and do not stop the sweep.
pub fn sweep(
    base: &RunConfig,
    labels: &[usize],
    seeds: &[u64],
    methods: &[Method],
) -> (Vec<SweepCell>, Vec<CellRun>) {
    let mut jobs = Vec::new();
    for &n in labels {
        for &method in methods {
            for &seed in seeds {
                jobs.push((n, method, seed));
            }
        }
    }
    let runs: Vec<CellRun> = jobs
        .par_iter()
        .map(|&(n_labeled, method, seed)| {
            let cfg = RunConfig {
                n_labeled,
                method,
                seed,
                ..base.clone()
            };
            let result = run_experiment(&cfg)
                .map(|out| SummaryRow::new(&cfg, &out))
                .map_err(|e| e.to_string());
            CellRun {
                n_labeled,
                method,
                seed,
                result,
            }
        })
        .collect();

    let mut cells = Vec::new();
    for &n in labels {
        for &method in methods {
            let cell_runs: Vec<&CellRun> = runs
                .iter()
                .filter(|r| r.n_labeled == n && r.method == method)
                .collect();
            let ok: Vec<&SummaryRow> = cell_runs.iter().filter_map(|r| r.result.as_ref().ok()).collect();
            let bal: Vec<f64> = ok.iter().map(|r| r.balanced_acc).collect();
            let overall: Vec<f64> = ok.iter().map(|r| r.overall_acc).collect();
            let (mean_b, std_b) = mean_std(&bal);
            cells.push(SweepCell {
                n_labeled: n,
                method: method.to_string(),
                runs: ok.len(),
                failures: cell_runs.len() - ok.len(),
                mean_balanced_acc: mean_b,
                std_balanced_acc: std_b,
                mean_overall_acc: mean_std(&overall).0,
            });
        }
    }
    (cells, runs)
}

/// Model variants compared by [`ablate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    WithoutSemantic,
    WithoutInstance,
    WithoutConsistency,
    WithCrossEntropy,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::WithoutSemantic,
        Variant::WithoutInstance,
        Variant::WithoutConsistency,
        Variant::WithCrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutSemantic => "wo_semantic_eaf",
            Variant::WithoutInstance => "wo_instance_eaf",
            Variant::WithoutConsistency => "wo_category_eaf",
            Variant::WithCrossEntropy => "w_cross_entropy",
        }
    }

    /// The base config with this variant's component switched off or
    /// replaced. The base is treated as the full model.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut cfg = RunConfig {
            method: Method::Leaf,
            semantic_eaf: true,
            instance_eaf: true,
            unsup_loss: UnsupLoss::Ambiguous,
            ..base.clone()
        };
        match self {
            Variant::Full => {}
            Variant::WithoutSemantic => cfg.semantic_eaf = false,
            Variant::WithoutInstance => cfg.instance_eaf = false,
            Variant::WithoutConsistency => cfg.unsup_loss = UnsupLoss::None,
            Variant::WithCrossEntropy => cfg.unsup_loss = UnsupLoss::CrossEntropy,
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub runs: usize,
    pub failures: usize,
    pub mean_balanced_acc: f64,
    pub std_balanced_acc: f64,
    pub mean_overall_acc: f64,
    pub per_seed_balanced_acc: Vec<f64>,
}

impl AblationRow {
    pub const HEADER: &'static str =
        "variant,runs,failures,mean_balanced_acc,std_balanced_acc,mean_overall_acc,per_seed_balanced_acc";

    pub fn to_csv_line(&self) -> String {
        let per_seed = self
            .per_seed_balanced_acc
            .iter()
            .map(f64::to_string)
            .collect::<Vec<_>>()
            .join(";");
        format!(
            "{},{},{},{},{},{},{}",
            self.variant,
            self.runs,
            self.failures,
            self.mean_balanced_acc,
            self.std_balanced_acc,
            self.mean_overall_acc,
            per_seed
        )
    }
}

/// Runs every variant under the same seeds.
pub fn ablate(base: &RunConfig, seeds: &[u64], variants: &[Variant]) -> Vec<AblationRow> {
    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results: Vec<(Variant, u64, Option<SummaryRow>)> = jobs
        .par_iter()
        .map(|&(variant, seed)| {
            let cfg = RunConfig {
                seed,
                ..variant.apply(base)
            };
            let row = match run_experiment(&cfg) {
                Ok(out) => Some(SummaryRow::new(&cfg, &out)),
                Err(e) => {
                    log::warn!("ablation {} seed {seed} failed: {e}", variant.name());
                    None
                }
            };
            (variant, seed, row)
        })
        .collect();

    variants
        .iter()
        .map(|&variant| {
            let rows: Vec<&Option<SummaryRow>> = results
                .iter()
                .filter(|(v, _, _)| *v == variant)
                .map(|(_, _, r)| r)
                .collect();
            let ok: Vec<&SummaryRow> = rows.iter().filter_map(|r| r.as_ref()).collect();
            let bal: Vec<f64> = ok.iter().map(|r| r.balanced_acc).collect();
            let overall: Vec<f64> = ok.iter().map(|r| r.overall_acc).collect();
            let (mean_b, std_b) = mean_std(&bal);
            AblationRow {
                variant: variant.name().to_string(),
                runs: ok.len(),
                failures: rows.len() - ok.len(),
                mean_balanced_acc: mean_b,
                std_balanced_acc: std_b,
                mean_overall_acc: mean_std(&overall).0,
                per_seed_balanced_acc: bal,
            }
        })
        .collect()
}
