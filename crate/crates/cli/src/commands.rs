use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tppgw::cluster::{spectral_cluster, ClusteringReport};
use tppgw::data::{header_path, load_dataset, save_dataset, Dataset, DatasetHeader};
use tppgw::gw::{self, uniform, GwConfig};
use tppgw::seqdist::{distance_matrix, kernel_from_distances, median_bandwidth};
use tppgw::simulate::make_synthetic;
use tppgw::tpp::{embedding_bandwidth, embedding_kernel, Backbone, Checkpoint, TppParams};
use tppgw::train::{evaluate_model, train, TrainConfig, TrainReport};
use tppgw::{DistancePower, Error as CoreError, SubsetMode, SyntheticPlan};

use crate::error::{CliError, Result};
use crate::io::{self, fmt_f64};
use crate::manifest::{manifest_path, ManifestSpec, RunManifest};

/// Flags shared by every command.
#[derive(Clone, Debug, Default)]
pub struct Context {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub argv: Vec<String>,
}

impl Context {
    fn manifest(
        &self,
        out: &Path,
        out_is_dir: bool,
        command: &str,
        config: serde_json::Value,
        seed: u64,
        inputs: &[PathBuf],
    ) -> Result<RunManifest> {
        RunManifest::begin(
            manifest_path(out, out_is_dir),
            ManifestSpec {
                command,
                argv: &self.argv,
                config,
                seed,
                threads: self.threads,
                inputs,
            },
        )
    }
}

/// Runs `body` between writing and finalizing a manifest.
fn with_manifest<T>(manifest: RunManifest, body: impl FnOnce() -> Result<T>) -> Result<T> {
    let outcome = body();
    manifest.finish(&outcome)?;
    outcome
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    TwoClusterDesk,
    FourFamily,
}

impl Preset {
    pub fn plan(self, sequences_per_cluster: usize, seed: u64) -> SyntheticPlan {
        match self {
            Preset::TwoClusterDesk => SyntheticPlan::two_cluster_desk(sequences_per_cluster, seed),
            Preset::FourFamily => SyntheticPlan::four_family(sequences_per_cluster, seed),
        }
    }
}

/// Dataset header supplied on the command line.
pub fn flag_header(num_types: Option<usize>, horizon: Option<f64>) -> Result<Option<DatasetHeader>> {
    match (num_types, horizon) {
        (Some(num_types), Some(horizon)) => Ok(Some(DatasetHeader { num_types, horizon })),
        (None, None) => Ok(None),
        _ => Err(CliError::Config("--num-types and --horizon must be given together".into())),
    }
}

/// The dataset file plus its sidecar header, when present.
pub fn dataset_inputs(data: &Path) -> Vec<PathBuf> {
    let mut v = vec![data.to_path_buf()];
    let h = header_path(data);
    if h.exists() {
        v.push(h);
    }
    v
}

fn ids_of(dataset: &Dataset) -> Vec<String> {
    dataset.sequences().iter().map(|s| s.id().to_string()).collect()
}

pub fn load_model(path: &Path) -> Result<TppParams<f64>> {
    let ck: Checkpoint = io::read_artifact(path)?;
    TppParams::from_checkpoint(&ck).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn check_dims(model: &TppParams<f64>, dataset: &Dataset) -> Result<()> {
    if model.num_types() != dataset.num_types() {
        return Err(CliError::Data(format!(
            "checkpoint has {} event types but the dataset has {}",
            model.num_types(),
            dataset.num_types()
        )));
    }
    Ok(())
}

// ------------------------------------------------------------------ simulate

pub fn resolve_plan(plan: Option<&Path>, preset: Option<Preset>, per_cluster: usize, seed: Option<u64>) -> Result<SyntheticPlan> {
    let mut plan = match (plan, preset) {
        (Some(p), None) => io::read_config::<SyntheticPlan>(p)?,
        (None, Some(preset)) => preset.plan(per_cluster, 0),
        _ => return Err(CliError::Config("give exactly one of --plan and --preset".into())),
    };
    if let Some(s) = seed {
        plan.seed = s;
    }
    plan.validate()?;
    Ok(plan)
}

pub fn cmd_simulate(ctx: &Context, plan: &SyntheticPlan, inputs: &[PathBuf], out: &Path) -> Result<Dataset> {
    let manifest = ctx.manifest(out, false, "simulate", json!(plan), plan.seed, inputs)?;
    with_manifest(manifest, || {
        let data = make_synthetic(plan)?;
        save_dataset(&data, out)?;
        Ok(data)
    })
}

// ------------------------------------------------------------------ kernel

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KernelArgs {
    pub mode: SubsetMode,
    /// `None` picks the median distance.
    pub sigma: Option<f64>,
    pub power: DistancePower,
}

pub fn parse_sigma(s: &str) -> Result<Option<f64>> {
    if s == "auto" {
        return Ok(None);
    }
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(Some(v)),
        _ => Err(CliError::Config(format!("--sigma must be `auto` or a positive number, got {s:?}"))),
    }
}

pub fn cmd_kernel(ctx: &Context, data: &Path, header: Option<DatasetHeader>, args: &KernelArgs, out: &Path) -> Result<f64> {
    let config = json!({ "data": data, "header": header, "kernel": args });
    let manifest = ctx.manifest(out, false, "kernel", config, ctx.seed.unwrap_or(0), &dataset_inputs(data))?;
    with_manifest(manifest, || {
        let dataset = load_dataset(data, header)?;
        let d = distance_matrix::<f64>(dataset.sequences(), args.mode, dataset.num_types(), dataset.horizon())?;
        let sigma = args.sigma.unwrap_or_else(|| median_bandwidth(&d));
        let k = kernel_from_distances(&d, sigma, args.power)?;
        io::write_kernel_csv(out, &ids_of(&dataset), k.matrix())?;
        Ok(sigma)
    })
}

// ------------------------------------------------------------------ gw

pub fn cmd_gw(ctx: &Context, k1: &Path, k2: &Path, config: &GwConfig, out: &Path) -> Result<f64> {
    let inputs = [k1.to_path_buf(), k2.to_path_buf()];
    let manifest = ctx.manifest(out, false, "gw", json!(config), ctx.seed.unwrap_or(0), &inputs)?;
    with_manifest(manifest, || {
        let (ids1, a) = io::read_kernel_csv(k1)?;
        let (ids2, b) = io::read_kernel_csv(k2)?;
        let res = gw::solve(&a, &b, &uniform(a.n()), &uniform(b.n()), config, None)?;
        io::write_plan_csv(out, &ids1, &ids2, &res.plan, res.gw_squared)?;
        Ok(res.gw_squared)
    })
}

// ------------------------------------------------------------------ train

pub fn cmd_train(ctx: &Context, data: &Path, header: Option<DatasetHeader>, config: &TrainConfig, out: &Path) -> Result<TrainReport> {
    io::create_dir(out)?;
    let manifest = ctx.manifest(out, true, "train", json!(config), config.seed, &dataset_inputs(data))?;
    with_manifest(manifest, || {
        let dataset = load_dataset(data, header)?;
        train_into(&dataset, config, out)
    })
}

/// Trains and writes `checkpoint.json`, `report.json` and `metrics.csv`.
/// A non-finite objective leaves `last_good_checkpoint.json` behind.
pub fn train_into(dataset: &Dataset, config: &TrainConfig, out: &Path) -> Result<TrainReport> {
    let (model, mut report) = match train::<f64>(dataset, config) {
        Ok(v) => v,
        Err(CoreError::NonFiniteObjective {
            epoch,
            batch_ids,
            last_good,
        }) => {
            io::write_json(&out.join("last_good_checkpoint.json"), &*last_good)?;
            return Err(CoreError::NonFiniteObjective {
                epoch,
                batch_ids,
                last_good,
            }
            .into());
        }
        Err(e) => return Err(e.into()),
    };
    let ck_path = out.join("checkpoint.json");
    io::write_json(&ck_path, &model.to_checkpoint())?;
    report.checkpoint_path = Some(ck_path);
    io::write_json(&out.join("report.json"), &report)?;
    write_metrics_csv(&out.join("metrics.csv"), &report)?;
    Ok(report)
}

fn write_metrics_csv(path: &Path, report: &TrainReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| CliError::Data(format!("{}: {e}", path.display()));
    w.write_record(["epoch", "mean_nll", "gw_squared", "objective"]).map_err(err)?;
    for (i, ((n, g), o)) in report.mean_nll.iter().zip(&report.gw_squared).zip(&report.objective).enumerate() {
        w.write_record([(i + 1).to_string(), fmt_f64(*n), fmt_f64(*g), fmt_f64(*o)]).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

// ------------------------------------------------------------------ evaluate

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// log-likelihood per event
    pub ell: f64,
    pub acc: f64,
    pub sequences: usize,
    pub events: usize,
}

pub fn evaluate(model: &TppParams<f64>, dataset: &Dataset) -> Result<Evaluation> {
    check_dims(model, dataset)?;
    let (ell, acc) = evaluate_model(model, dataset)?;
    Ok(Evaluation {
        ell,
        acc,
        sequences: dataset.len(),
        events: dataset.total_events(),
    })
}

pub fn cmd_evaluate(ctx: &Context, model: &Path, data: &Path, header: Option<DatasetHeader>, out: &Path) -> Result<Evaluation> {
    let mut inputs = vec![model.to_path_buf()];
    inputs.extend(dataset_inputs(data));
    let config = json!({ "model": model, "data": data, "header": header });
    let manifest = ctx.manifest(out, false, "evaluate", config, ctx.seed.unwrap_or(0), &inputs)?;
    with_manifest(manifest, || {
        let params = load_model(model)?;
        let dataset = load_dataset(data, header)?;
        let e = evaluate(&params, &dataset)?;
        io::write_json(out, &e)?;
        Ok(e)
    })
}

// ------------------------------------------------------------------ cluster

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterOutput {
    pub k: usize,
    pub ids: Vec<String>,
    pub predicted_labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nmi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rand_index: Option<f64>,
}

/// Ground-truth labels for `ids`, looked up by sequence id.
pub fn labels_for(ids: &[String], dataset: &Dataset) -> Result<Vec<usize>> {
    let by_id: std::collections::HashMap<&str, Option<usize>> =
        dataset.sequences().iter().map(|s| (s.id(), s.label())).collect();
    ids.iter()
        .map(|id| match by_id.get(id.as_str()) {
            Some(Some(l)) => Ok(*l),
            Some(None) => Err(CliError::Data(format!("sequence {id} has no label"))),
            None => Err(CliError::Data(format!("sequence {id} is not in the label dataset"))),
        })
        .collect()
}

pub fn cmd_cluster(
    ctx: &Context,
    kernel: &Path,
    k: usize,
    labels: Option<(&Path, Option<DatasetHeader>)>,
    out: &Path,
) -> Result<ClusterOutput> {
    let seed = ctx.seed.unwrap_or(0);
    let mut inputs = vec![kernel.to_path_buf()];
    if let Some((p, _)) = labels {
        inputs.extend(dataset_inputs(p));
    }
    let config = json!({ "kernel": kernel, "k": k, "labels": labels.map(|l| l.0) });
    let manifest = ctx.manifest(out, false, "cluster", config, seed, &inputs)?;
    with_manifest(manifest, || {
        let (ids, km) = io::read_kernel_csv(kernel)?;
        let predicted = spectral_cluster(&km, k, seed)?;
        let mut result = ClusterOutput {
            k,
            ids,
            predicted_labels: predicted,
            nmi: None,
            rand_index: None,
        };
        if let Some((p, header)) = labels {
            let truth = labels_for(&result.ids, &load_dataset(p, header)?)?;
            let report = ClusteringReport::score(result.predicted_labels.clone(), &truth, k)?;
            result.nmi = Some(report.nmi);
            result.rand_index = Some(report.rand_index);
        }
        io::write_json(out, &result)?;
        Ok(result)
    })
}

// ------------------------------------------------------------------ embed

pub fn cmd_embed(ctx: &Context, model: &Path, data: &Path, header: Option<DatasetHeader>, out: &Path) -> Result<usize> {
    let mut inputs = vec![model.to_path_buf()];
    inputs.extend(dataset_inputs(data));
    let config = json!({ "model": model, "data": data, "header": header });
    let manifest = ctx.manifest(out, false, "embed", config, ctx.seed.unwrap_or(0), &inputs)?;
    with_manifest(manifest, || {
        let params = load_model(model)?;
        let dataset = load_dataset(data, header)?;
        check_dims(&params, &dataset)?;
        write_embeddings(&params, &dataset, out)
    })
}

/// `id[, label], h_1..h_D`, one row per sequence; the label column appears
/// only when some sequence is labeled.
pub fn write_embeddings(params: &TppParams<f64>, dataset: &Dataset, out: &Path) -> Result<usize> {
    let err = |e: csv::Error| CliError::Data(format!("{}: {e}", out.display()));
    let labeled = dataset.sequences().iter().any(|s| s.label().is_some());
    let d = params.embedding_dim();
    let mut w = csv::Writer::from_path(out).map_err(err)?;
    let mut header = vec!["id".to_string()];
    if labeled {
        header.push("label".into());
    }
    header.extend((1..=d).map(|i| format!("h_{i}")));
    w.write_record(&header).map_err(err)?;
    for s in dataset.sequences() {
        let enc = params.encode(s);
        let mut row = vec![s.id().to_string()];
        if labeled {
            row.push(s.label().map(|l| l.to_string()).unwrap_or_default());
        }
        row.extend(enc.sequence_embedding.iter().map(|&v| fmt_f64(v)));
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::io(out, e))?;
    Ok(dataset.len())
}

/// Spectral clustering of the Gaussian kernel of a model's sequence
/// embeddings, scored against the dataset labels.
pub fn cluster_embeddings(params: &TppParams<f64>, dataset: &Dataset, k: usize, seed: u64) -> Result<ClusteringReport> {
    let truth = dataset
        .labels()
        .ok_or_else(|| CliError::Data("embedding clustering needs a fully labeled dataset".into()))?;
    let enc: Vec<_> = dataset.sequences().iter().map(|s| params.encode(s)).collect();
    let embeddings: Vec<Vec<f64>> = enc.iter().map(|e| e.sequence_embedding.clone()).collect();
    let kernel = embedding_kernel(&enc, embedding_bandwidth(&embeddings))?;
    let predicted = spectral_cluster(&kernel, k, seed)?;
    Ok(ClusteringReport::score(predicted, &truth, k)?)
}
