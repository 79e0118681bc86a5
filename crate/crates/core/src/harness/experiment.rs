//! Paired runs and the component / layer-count ablations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::{generate_dataset, DataConfig, SynthSample};
use super::model::BlockKind;
use super::train::{evaluate, train, EvalReport, Model, TrainConfig, TrainReport};
use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, DEFAULT_THRESHOLD};

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

/// Everything a CLI invocation needs; every field has a default and
/// unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub threshold: f64,
    pub seeds: Vec<u64>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            train: TrainConfig::default(),
            threshold: DEFAULT_THRESHOLD,
            seeds: default_seeds(),
            data_dir: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "threshold must lie in [0,1], got {}",
                self.threshold
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        Ok(())
    }
}

/// `n_train + n_test` samples drawn with `seed`, split in order.
pub fn split_dataset(
    data: &DataConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Vec<SynthSample>, Vec<SynthSample>)> {
    let mut all = generate_dataset(&DataConfig {
        n: cfg.n_train + cfg.n_test,
        seed,
        ..*data
    })?;
    let test = all.split_off(cfg.n_train);
    Ok((all, test))
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: Model,
    pub train: TrainReport,
    pub eval: EvalReport,
}

impl RunOutcome {
    /// Posterior-generator calls over all conformable blocks:
    /// `(aggregated, unaggregated)`.
    pub fn tpg_calls(&self) -> (u64, u64) {
        self.model
            .net
            .tpg_traces()
            .iter()
            .fold((0, 0), |(a, u), (_, t)| (a + t.aggregated, u + t.unaggregated))
    }
}

/// Train `cfg` with its seed replaced by `seed`, then evaluate on `test`.
pub fn run_on(
    cfg: &TrainConfig,
    seed: u64,
    train_set: &[SynthSample],
    test_set: &[SynthSample],
    threshold: f64,
) -> Result<RunOutcome> {
    let cfg = TrainConfig { seed, ..*cfg };
    let mut model = Model::new(&cfg)?;
    let report = train(&cfg, &mut model, train_set)?;
    let eval = evaluate(&mut model, test_set, threshold)?;
    Ok(RunOutcome {
        model,
        train: report,
        eval,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub group: String,
    pub name: String,
    pub config: TrainConfig,
    pub per_seed: Vec<MetricsReport>,
    pub mean: MetricsReport,
    pub final_losses: Vec<f64>,
    pub tpg_aggregated: u64,
    pub tpg_unaggregated: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub version: String,
    pub seeds: Vec<u64>,
    pub run_config: RunConfig,
    pub rows: Vec<AblationRow>,
}

/// Component switches on a conformable bottleneck, then 0–3 conformable
/// layers.
pub fn ablation_variants(base: &TrainConfig) -> Vec<(&'static str, String, TrainConfig)> {
    let conform = TrainConfig {
        bottleneck: BlockKind::Conform,
        conform_layers: None,
        ..*base
    };
    let with = |f: fn(&mut TrainConfig)| {
        let mut c = conform;
        f(&mut c);
        c
    };
    let mut out = vec![
        ("components", "all_on".to_string(), conform),
        (
            "components",
            "no_filtering".to_string(),
            with(|c| c.tpg.filtering = false),
        ),
        (
            "components",
            "no_dilation".to_string(),
            with(|c| c.tpg.dilation = false),
        ),
        (
            "components",
            "no_aggregation".to_string(),
            with(|c| c.tpg.aggregation = false),
        ),
    ];
    for k in 0..=3 {
        out.push((
            "layers",
            format!("conform_layers_{k}"),
            TrainConfig {
                conform_layers: Some(k),
                ..conform
            },
        ));
    }
    out
}

pub fn ablation_suite(run: &RunConfig) -> Result<AblationTable> {
    run.validate()?;
    let variants = ablation_variants(&run.train);
    let mut per_variant: Vec<Vec<RunOutcome>> = vec![Vec::new(); variants.len()];
    for &seed in &run.seeds {
        let (train_set, test_set) = split_dataset(&run.data, &run.train, seed)?;
        for (k, (_, name, cfg)) in variants.iter().enumerate() {
            log::info!("ablation {name}, seed {seed}");
            per_variant[k].push(run_on(cfg, seed, &train_set, &test_set, run.threshold)?);
        }
    }
    let rows = variants
        .into_iter()
        .zip(per_variant)
        .map(|((group, name, config), outcomes)| {
            let per_seed: Vec<MetricsReport> = outcomes.iter().map(|o| o.eval.mean).collect();
            let (agg, unagg) = outcomes.iter().fold((0, 0), |(a, u), o| {
                let (x, y) = o.tpg_calls();
                (a + x, u + y)
            });
            AblationRow {
                group: group.to_string(),
                name,
                config,
                mean: MetricsReport::mean(&per_seed).expect("seeds non-empty"),
                per_seed,
                final_losses: outcomes.iter().map(|o| o.train.final_loss()).collect(),
                tpg_aggregated: agg,
                tpg_unaggregated: unagg,
            }
        })
        .collect();
    Ok(AblationTable {
        version: crate::VERSION.to_string(),
        seeds: run.seeds.clone(),
        run_config: run.clone(),
        rows,
    })
}

impl AblationTable {
    /// Seed-mean metrics as a Markdown table.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| group | variant | dice | auc | cl_dice | betti0_error | betti1_error | euler_error | ari_error | vi |\n\
             |---|---|---|---|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            let m = &r.mean;
            let _ = writeln!(
                s,
                "| {} | {} | {:.4} | {:.4} | {:.4} | {:.3} | {:.3} | {:.3} | {:.4} | {:.4} |",
                r.group,
                r.name,
                m.dice,
                m.auc,
                m.cl_dice,
                m.betti0_error,
                m.betti1_error,
                m.euler_error,
                m.ari_error,
                m.vi
            );
        }
        s
    }
}
