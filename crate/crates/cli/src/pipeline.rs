//! simulate -> train -> evaluate -> cluster under one run directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use tppgw::cluster::{dis_sc_baseline_with, ClusteringReport};
use tppgw::simulate::make_synthetic;
use tppgw::train::TrainConfig;
use tppgw::{save_dataset, Dataset, DistancePower, SubsetMode, SyntheticPlan, TppParams};

use crate::commands::{cluster_embeddings, dataset_inputs, evaluate, load_model, train_into, Context, Preset};
use crate::error::{CliError, Result};
use crate::io;
use crate::manifest::{manifest_path, ManifestSpec, RunManifest};

pub const STAGES: [&str; 4] = ["simulate", "train", "evaluate", "cluster"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    pub simulate: Option<SimulateStage>,
    pub train: Option<TrainStage>,
    pub evaluate: Option<EvaluateStage>,
    pub cluster: Option<ClusterStage>,
}

/// Either a preset or an explicit plan. The pipeline seed replaces the plan seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateStage {
    #[serde(default)]
    pub preset: Option<Preset>,
    #[serde(default = "default_per_cluster")]
    pub sequences_per_cluster: usize,
    #[serde(default)]
    pub plan: Option<SyntheticPlan>,
}

fn default_per_cluster() -> usize {
    100
}

/// One training run per (tau, seed) pair; `config.tau` and `config.seed`
/// are overwritten.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainStage {
    pub taus: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub config: TrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateStage {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterStage {
    pub k: usize,
    #[serde(default)]
    pub baseline_mode: SubsetMode,
    #[serde(default)]
    pub baseline_power: DistancePower,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub tau: f64,
    pub seed: u64,
    pub ell: f64,
    pub acc: f64,
    pub nmi: f64,
    pub rand_index: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauSummary {
    pub tau: f64,
    pub runs: usize,
    pub ell: f64,
    pub acc: f64,
    pub nmi: f64,
    pub rand_index: f64,
}

/// Likelihood metrics do not apply to the baseline and are null.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub ell: Option<f64>,
    pub acc: Option<f64>,
    pub nmi: f64,
    pub rand_index: f64,
}

/// Contents of `summary.json`; deliberately free of timestamps so that
/// repeated runs compare byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub k: usize,
    pub sequences: usize,
    pub events: usize,
    pub baseline: BaselineSummary,
    pub runs: Vec<RunSummary>,
    pub by_tau: Vec<TauSummary>,
}

impl PipelineConfig {
    /// Checks that every stage block is present and returns them.
    pub fn stages(&self) -> Result<(&SimulateStage, &TrainStage, &EvaluateStage, &ClusterStage)> {
        let missing = |stage: &str| CliError::Config(format!("pipeline config has no `{stage}` stage block"));
        let sim = self.simulate.as_ref().ok_or_else(|| missing("simulate"))?;
        let train = self.train.as_ref().ok_or_else(|| missing("train"))?;
        let eval = self.evaluate.as_ref().ok_or_else(|| missing("evaluate"))?;
        let cluster = self.cluster.as_ref().ok_or_else(|| missing("cluster"))?;
        if train.taus.is_empty() || train.seeds.is_empty() {
            return Err(CliError::Config("train stage needs at least one tau and one seed".into()));
        }
        Ok((sim, train, eval, cluster))
    }
}

impl SimulateStage {
    fn plan(&self, seed: u64) -> Result<SyntheticPlan> {
        let mut plan = match (&self.plan, self.preset) {
            (Some(p), None) => p.clone(),
            (None, Some(preset)) => preset.plan(self.sequences_per_cluster, seed),
            _ => return Err(CliError::Config("simulate stage needs exactly one of `preset` and `plan`".into())),
        };
        plan.seed = seed;
        Ok(plan)
    }
}

fn run_name(tau: f64, seed: u64) -> String {
    format!("tau-{tau}-seed-{seed}")
}

fn stage<T>(name: &str, body: impl FnOnce() -> Result<T>) -> Result<T> {
    body().map_err(|e| CliError::Stage {
        stage: name.to_string(),
        source: Box::new(e),
    })
}

struct StageCtx<'a> {
    ctx: &'a Context,
    seed: u64,
}

impl StageCtx<'_> {
    fn manifest(&self, dir: &Path, command: &str, config: serde_json::Value, seed: u64, inputs: &[PathBuf]) -> Result<RunManifest> {
        io::create_dir(dir)?;
        RunManifest::begin(
            manifest_path(dir, true),
            ManifestSpec {
                command,
                argv: &self.ctx.argv,
                config,
                seed,
                threads: self.ctx.threads,
                inputs,
            },
        )
    }
}

fn finish<T>(m: RunManifest, outcome: Result<T>) -> Result<T> {
    m.finish(&outcome)?;
    outcome
}

pub fn cmd_pipeline(ctx: &Context, config_path: &Path, out: &Path) -> Result<Summary> {
    let mut config: PipelineConfig = io::read_config(config_path)?;
    if let Some(s) = ctx.seed {
        config.seed = s;
    }
    let (sim, train_stage, _, cluster) = config.stages()?;
    io::create_dir(out)?;
    let top = RunManifest::begin(
        manifest_path(out, true),
        ManifestSpec {
            command: "pipeline",
            argv: &ctx.argv,
            config: json!(config),
            seed: config.seed,
            threads: ctx.threads,
            inputs: &[config_path.to_path_buf()],
        },
    )?;
    let sc = StageCtx { ctx, seed: config.seed };
    let outcome = run_stages(&sc, sim, train_stage, cluster, out);
    finish(top, outcome)
}

fn run_stages(sc: &StageCtx<'_>, sim: &SimulateStage, train_stage: &TrainStage, cluster: &ClusterStage, out: &Path) -> Result<Summary> {
    // simulate
    let sim_dir = out.join("simulate");
    let data_path = sim_dir.join("data.jsonl");
    let dataset: Dataset = stage("simulate", || {
        let plan = sim.plan(sc.seed)?;
        let m = sc.manifest(&sim_dir, "pipeline simulate", json!(plan), sc.seed, &[])?;
        finish(
            m,
            (|| {
                let data = make_synthetic(&plan)?;
                save_dataset(&data, &data_path)?;
                Ok(data)
            })(),
        )
    })?;

    // train
    let train_dir = out.join("train");
    let mut runs: Vec<(f64, u64, PathBuf)> = Vec::new();
    stage("train", || {
        for &tau in &train_stage.taus {
            for &seed in &train_stage.seeds {
                let cfg = TrainConfig {
                    tau,
                    seed,
                    ..train_stage.config.clone()
                };
                let dir = train_dir.join(run_name(tau, seed));
                let m = sc.manifest(&dir, "pipeline train", json!(cfg), seed, &dataset_inputs(&data_path))?;
                finish(m, train_into(&dataset, &cfg, &dir))?;
                runs.push((tau, seed, dir.join("checkpoint.json")));
            }
        }
        Ok(())
    })?;

    // evaluate
    let eval_dir = out.join("evaluate");
    let models: Vec<TppParams<f64>> = stage("evaluate", || {
        let inputs: Vec<PathBuf> = runs.iter().map(|r| r.2.clone()).chain(dataset_inputs(&data_path)).collect();
        let m = sc.manifest(&eval_dir, "pipeline evaluate", json!({}), sc.seed, &inputs)?;
        finish(
            m,
            (|| {
                let mut models = Vec::new();
                for (tau, seed, ck) in &runs {
                    let params = load_model(ck)?;
                    let e = evaluate(&params, &dataset)?;
                    io::write_json(&eval_dir.join(format!("{}.json", run_name(*tau, *seed))), &e)?;
                    models.push(params);
                }
                Ok(models)
            })(),
        )
    })?;

    // cluster
    let cluster_dir = out.join("cluster");
    let (baseline, clustered): (ClusteringReport, Vec<ClusteringReport>) = stage("cluster", || {
        let inputs: Vec<PathBuf> = runs.iter().map(|r| r.2.clone()).chain(dataset_inputs(&data_path)).collect();
        let m = sc.manifest(&cluster_dir, "pipeline cluster", json!(cluster), sc.seed, &inputs)?;
        finish(
            m,
            (|| {
                let baseline = dis_sc_baseline_with(&dataset, cluster.k, cluster.baseline_mode, cluster.baseline_power, sc.seed)?;
                io::write_json(&cluster_dir.join("baseline.json"), &baseline)?;
                let mut reports = Vec::new();
                for ((tau, seed, _), params) in runs.iter().zip(&models) {
                    let r = cluster_embeddings(params, &dataset, cluster.k, *seed)?;
                    io::write_json(&cluster_dir.join(format!("{}.json", run_name(*tau, *seed))), &r)?;
                    reports.push(r);
                }
                Ok((baseline, reports))
            })(),
        )
    })?;

    let mut run_rows = Vec::new();
    for ((tau, seed, _), report) in runs.iter().zip(&clustered) {
        let e: crate::commands::Evaluation = io::read_artifact(&eval_dir.join(format!("{}.json", run_name(*tau, *seed))))?;
        run_rows.push(RunSummary {
            tau: *tau,
            seed: *seed,
            ell: e.ell,
            acc: e.acc,
            nmi: report.nmi,
            rand_index: report.rand_index,
        });
    }
    let by_tau = train_stage
        .taus
        .iter()
        .map(|&tau| {
            let rows: Vec<&RunSummary> = run_rows.iter().filter(|r| r.tau == tau).collect();
            let mean = |f: fn(&RunSummary) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / rows.len() as f64;
            TauSummary {
                tau,
                runs: rows.len(),
                ell: mean(|r| r.ell),
                acc: mean(|r| r.acc),
                nmi: mean(|r| r.nmi),
                rand_index: mean(|r| r.rand_index),
            }
        })
        .collect();
    let summary = Summary {
        seed: sc.seed,
        k: cluster.k,
        sequences: dataset.len(),
        events: dataset.total_events(),
        baseline: BaselineSummary {
            ell: None,
            acc: None,
            nmi: baseline.nmi,
            rand_index: baseline.rand_index,
        },
        runs: run_rows,
        by_tau,
    };
    io::write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}
