//! Maximum likelihood with a Gromov-Wasserstein regularizer.
//!
//! Per batch: encode, build the Gaussian embedding kernel with a median
//! bandwidth, solve the transport plan against the fixed reference kernel,
//! then take one optimizer step on the model with the plan held fixed.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EventSequence};
use crate::error::{Error, Result};
use crate::gw::{self, GwConfig, GwResult, TransportPlan};
use crate::kernel::KernelMatrix;
use crate::scalar::Scalar;
use crate::seqdist::{sample_reference_kernel, DistancePower, SubsetMode};
use crate::tpp::{
    backward_batch, embedding_bandwidth, embedding_kernel_backward, forward_batch, Backbone, GradientBundle, TppParams,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub tau: f64,
    #[serde(rename = "reference_L", alias = "reference_l")]
    pub reference_l: usize,
    pub subset_mode: SubsetMode,
    pub distance_power: DistancePower,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub gw: GwConfig,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Draw a fresh reference sample at the start of every epoch.
    pub resample_reference: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 1.0,
            reference_l: 64,
            subset_mode: SubsetMode::Singleton,
            distance_power: DistancePower::Unsquared,
            batch_size: 32,
            epochs: 10,
            learning_rate: 0.01,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            gw: GwConfig::default(),
            embed_dim: 8,
            hidden_dim: 16,
            resample_reference: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be a nonnegative number, got {}", self.tau)));
        }
        if self.reference_l < 2 {
            return Err(Error::Config(format!("reference_L must be at least 2, got {}", self.reference_l)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("embed_dim and hidden_dim must be positive".into()));
        }
        self.gw.validate()
    }
}

/// Per-epoch training curves; every list has one entry per epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mean_nll: Vec<f64>,
    pub gw_squared: Vec<f64>,
    pub objective: Vec<f64>,
    pub checkpoint_path: Option<PathBuf>,
    pub wall_seconds: f64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First-order optimizer over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: T,
    first: Vec<T>,
    second: Vec<T>,
    steps: i32,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, n: usize) -> Self {
        Optimizer {
            kind,
            lr: T::lit(lr),
            first: vec![T::zero(); n],
            second: vec![T::zero(); n],
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                self.steps += 1;
                let (b1, b2) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2));
                let c1 = T::one() - b1.powi(self.steps);
                let c2 = T::one() - b2.powi(self.steps);
                let eps = T::lit(ADAM_EPS);
                for (((p, &g), m), v) in params.iter_mut().zip(grad).zip(self.first.iter_mut()).zip(self.second.iter_mut()) {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Objective value and gradient at a given plan and bandwidth:
/// `mean NLL + tau * <C(K(theta), K_ref, T), T>`.
pub fn objective_at_plan<T: Scalar, B: Backbone<T>>(
    model: &B,
    batch: &[EventSequence],
    reference: &KernelMatrix<T>,
    tau: T,
    plan: &TransportPlan<T>,
    sigma: T,
) -> Result<(T, Vec<T>)> {
    let parts = Parts::forward(model, batch, Some(sigma))?;
    let fixed = gw::objective(&parts.kernel, reference, plan)?;
    let grad = parts.gradient(model, batch, reference, tau, plan)?;
    Ok((parts.nll + tau * fixed, grad))
}

struct Parts<T> {
    nll: T,
    embeddings: Vec<Vec<T>>,
    tapes: Vec<crate::tpp::Tape<T>>,
    kernel: KernelMatrix<T>,
    sigma: T,
}

impl<T: Scalar> Parts<T> {
    fn forward<B: Backbone<T>>(model: &B, batch: &[EventSequence], sigma: Option<T>) -> Result<Self> {
        if batch.len() < 2 {
            return Err(Error::Range(format!("objective needs a batch of at least 2, got {}", batch.len())));
        }
        let passes = forward_batch(model, batch);
        let mut nll = T::zero();
        let mut embeddings = Vec::with_capacity(batch.len());
        let mut tapes = Vec::with_capacity(batch.len());
        for (ll, enc, tape) in passes {
            nll -= ll;
            embeddings.push(enc.sequence_embedding);
            tapes.push(tape);
        }
        nll *= T::one() / T::from_usize_lossy(batch.len());
        let sigma = sigma.unwrap_or_else(|| embedding_bandwidth(&embeddings));
        let kernel = KernelMatrix::gaussian(&embeddings, sigma);
        Ok(Parts {
            nll,
            embeddings,
            tapes,
            kernel,
            sigma,
        })
    }

    fn gradient<B: Backbone<T>>(
        &self,
        model: &B,
        batch: &[EventSequence],
        reference: &KernelMatrix<T>,
        tau: T,
        plan: &TransportPlan<T>,
    ) -> Result<Vec<T>> {
        let weight = -T::one() / T::from_usize_lossy(batch.len());
        if tau == T::zero() {
            return Ok(backward_batch(model, batch, &self.tapes, weight, None));
        }
        let dk = gw::grad_wrt_k1(&self.kernel, reference, plan)?;
        let mut de = embedding_kernel_backward(&self.embeddings, &self.kernel, self.sigma, &dk);
        for row in de.iter_mut() {
            row.iter_mut().for_each(|v| *v *= tau);
        }
        Ok(backward_batch(model, batch, &self.tapes, weight, Some(&de)))
    }
}

/// Batch objective with a freshly solved plan.
pub fn objective<T: Scalar>(
    params: &TppParams<T>,
    batch: &[EventSequence],
    reference: &KernelMatrix<T>,
    tau: T,
    gw_config: &GwConfig,
) -> Result<(T, GradientBundle<T>, GwResult<T>)> {
    let out = objective_with_start(params, batch, reference, tau, gw_config, None)?;
    Ok((
        out.value,
        GradientBundle {
            dims: params.dims(),
            values: out.grad,
        },
        out.gw,
    ))
}

/// One evaluated batch.
#[derive(Clone, Debug)]
pub struct BatchObjective<T> {
    pub value: T,
    pub nll: T,
    pub grad: Vec<T>,
    pub gw: GwResult<T>,
}

/// [`objective`] for any backbone, optionally warm-starting the plan.
pub fn objective_with_start<T: Scalar, B: Backbone<T>>(
    model: &B,
    batch: &[EventSequence],
    reference: &KernelMatrix<T>,
    tau: T,
    gw_config: &GwConfig,
    warm_start: Option<&TransportPlan<T>>,
) -> Result<BatchObjective<T>> {
    let parts = Parts::forward(model, batch, None)?;
    let mu = gw::uniform::<T>(batch.len());
    let nu = gw::uniform::<T>(reference.n());
    let res = gw::solve(&parts.kernel, reference, &mu, &nu, gw_config, warm_start)?;
    let grad = parts.gradient(model, batch, reference, tau, &res.plan)?;
    let value = if tau == T::zero() {
        parts.nll
    } else {
        parts.nll + tau * res.gw_squared
    };
    Ok(BatchObjective {
        value,
        nll: parts.nll,
        grad,
        gw: res,
    })
}

/// Splits a shuffled index list into batches; a trailing batch of one is
/// merged into the previous batch.
pub fn make_batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().map_or(false, |b| b.len() == 1) {
        let tail = batches.pop().expect("checked");
        batches.last_mut().expect("checked").extend(tail);
    }
    for b in batches.iter_mut() {
        b.sort_unstable();
    }
    batches
}

/// Fits the recurrent model. Deterministic given `config.seed`.
pub fn train<T: Scalar>(dataset: &Dataset, config: &TrainConfig) -> Result<(TppParams<T>, TrainReport)> {
    let init = TppParams::<T>::init_for_dataset(dataset, config.embed_dim, config.hidden_dim, config.seed)?;
    train_from(init, dataset, config)
}

/// Training loop starting from given parameters.
pub fn train_from<T: Scalar>(
    mut params: TppParams<T>,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<(TppParams<T>, TrainReport)> {
    config.validate()?;
    if params.dims().num_types != dataset.num_types() {
        return Err(Error::Shape(format!(
            "model has {} event types, dataset has {}",
            params.dims().num_types,
            dataset.num_types()
        )));
    }
    if config.reference_l > dataset.len() {
        return Err(Error::Config(format!(
            "reference_L = {} exceeds the dataset size {}",
            config.reference_l,
            dataset.len()
        )));
    }
    let started = Instant::now();
    let tau = T::lit(config.tau);
    let mut reference = sample_reference_kernel::<T>(
        dataset,
        config.reference_l,
        config.subset_mode,
        config.distance_power,
        config.seed,
    )?
    .0;
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, params.values().len());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut report = TrainReport::default();
    let mut warm: Option<TransportPlan<T>> = None;
    let m = dataset.len();

    for epoch in 0..config.epochs {
        if config.resample_reference && epoch > 0 {
            reference = sample_reference_kernel::<T>(
                dataset,
                config.reference_l,
                config.subset_mode,
                config.distance_power,
                config.seed.wrapping_add(epoch as u64),
            )?
            .0;
            warm = None;
        }
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut shuffle_rng);
        let batches = make_batches(&order, config.batch_size);
        let full_batch = batches.len() == 1;
        let (mut nll_sum, mut gw_sum, mut obj_sum) = (0.0, 0.0, 0.0);
        for idx in &batches {
            let batch = dataset.select(idx);
            let start = if full_batch { warm.as_ref() } else { None };
            let step = objective_with_start(&params, &batch, &reference, tau, &config.gw, start);
            let non_finite = |params: &TppParams<T>| Error::NonFiniteObjective {
                epoch,
                batch_ids: batch.iter().map(|s| s.id().to_string()).collect(),
                last_good: Box::new(params.to_checkpoint()),
            };
            let out = match step {
                Ok(v) => v,
                Err(e) if e.is_numerical() => return Err(non_finite(&params)),
                Err(e) => return Err(e),
            };
            if !out.value.is_finite() || out.grad.iter().any(|g| !g.is_finite()) {
                return Err(non_finite(&params));
            }
            let before = params.clone();
            optimizer.step(params.values_mut(), &out.grad);
            params.project();
            if !params.all_finite() {
                return Err(non_finite(&before));
            }
            let w = batch.len() as f64;
            nll_sum += w * out.nll.as_f64();
            gw_sum += w * out.gw.gw_squared.as_f64();
            obj_sum += w * out.value.as_f64();
            if full_batch {
                warm = Some(out.gw.plan);
            }
        }
        report.mean_nll.push(nll_sum / m as f64);
        report.gw_squared.push(gw_sum / m as f64);
        report.objective.push(obj_sum / m as f64);
    }
    report.wall_seconds = started.elapsed().as_secs_f64();
    Ok((params, report))
}

/// Log-likelihood per event and next-type accuracy.
///
/// Accuracy counts events from the second one on: the prediction is the type
/// with the largest intensity at the true event time given the strict
/// history, ties going to the smallest type index.
pub fn evaluate_model<T: Scalar, B: Backbone<T>>(model: &B, dataset: &Dataset) -> Result<(f64, f64)> {
    if model.num_types() != dataset.num_types() {
        return Err(Error::Shape(format!(
            "model has {} event types, dataset has {}",
            model.num_types(),
            dataset.num_types()
        )));
    }
    let per_seq: Vec<(f64, usize, usize)> = dataset
        .sequences()
        .par_iter()
        .map(|s| {
            let ll = model.log_likelihood(s).as_f64();
            let scores = model.event_log_intensities(s);
            let mut hits = 0;
            let mut total = 0;
            for (e, row) in s.events().iter().zip(&scores).skip(1) {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                total += 1;
                if best == e.type_id {
                    hits += 1;
                }
            }
            (ll, hits, total)
        })
        .collect();
    let ll: f64 = per_seq.iter().map(|p| p.0).sum();
    let hits: usize = per_seq.iter().map(|p| p.1).sum();
    let total: usize = per_seq.iter().map(|p| p.2).sum();
    let ell = ll / dataset.total_events() as f64;
    let acc = if total == 0 { 0.0 } else { hits as f64 / total as f64 };
    Ok((ell, acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{make_synthetic, GeneratorSpec, SyntheticPlan};
    use crate::tpp::{nll_and_grad, TppDims};

    fn poisson_data(n: usize, seed: u64) -> Dataset {
        let plan = SyntheticPlan {
            cluster_specs: vec![GeneratorSpec::hom_poisson(vec![0.4, 0.2])],
            sequences_per_cluster: n,
            num_types: 2,
            horizon: 10.0,
            seed,
        };
        make_synthetic(&plan).unwrap()
    }

    #[test]
    fn batches_merge_a_trailing_singleton() {
        let order: Vec<usize> = (0..7).rev().collect();
        let b = make_batches(&order, 3);
        assert_eq!(b, vec![vec![4, 5, 6], vec![0, 1, 2, 3]]);
        assert_eq!(make_batches(&order, 7).len(), 1);
    }

    #[test]
    fn config_validation_and_json() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let cfg: TrainConfig = serde_json::from_str(r#"{"tau": 0.5, "reference_L": 8, "optimizer": "sgd"}"#).unwrap();
        assert_eq!(cfg.reference_l, 8);
        assert_eq!(cfg.optimizer, OptimizerKind::Sgd);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"tau": 0.5, "bogus": 1}"#).is_err());
    }

    #[test]
    fn zero_tau_equals_plain_likelihood() {
        let data = poisson_data(6, 3);
        let params = TppParams::<f64>::init_for_dataset(&data, 3, 4, 1).unwrap();
        let (reference, _) =
            sample_reference_kernel::<f64>(&data, 4, SubsetMode::Singleton, DistancePower::Unsquared, 2).unwrap();
        let batch = data.select(&[0, 1, 2, 3]);
        let (value, grad, _) = objective(&params, &batch, &reference, 0.0, &GwConfig::default()).unwrap();
        let (nll, g, _) = nll_and_grad(&params, &batch).unwrap();
        assert_eq!(value, nll);
        assert_eq!(grad.values, g.values);
    }

    #[test]
    fn zero_params_evaluate_in_closed_form() {
        let data = poisson_data(5, 4);
        let params = TppParams::<f64>::zeros(TppDims::new(2, 2, 3)).unwrap();
        let (ell, acc) = evaluate_model(&params, &data).unwrap();
        let expected = -(2.0 * 10.0 * 5.0) / data.total_events() as f64;
        assert!((ell - expected).abs() < 1e-12);
        let (mut zeros, mut total) = (0, 0);
        for s in data.sequences() {
            for e in s.events().iter().skip(1) {
                total += 1;
                zeros += (e.type_id == 0) as usize;
            }
        }
        assert!((acc - zeros as f64 / total as f64).abs() < 1e-15);
    }

    #[test]
    fn adam_moves_against_the_gradient() {
        let mut opt = Optimizer::<f64>::new(OptimizerKind::Adam, 0.1, 2);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[2.0, -0.5]);
        // the first Adam step has magnitude lr in every coordinate
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
        let mut sgd = Optimizer::<f64>::new(OptimizerKind::Sgd, 0.1, 1);
        let mut q = vec![1.0];
        sgd.step(&mut q, &[2.0]);
        assert!((q[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn training_is_deterministic() {
        let data = poisson_data(12, 5);
        let cfg = TrainConfig {
            reference_l: 6,
            batch_size: 4,
            epochs: 2,
            embed_dim: 2,
            hidden_dim: 3,
            ..TrainConfig::default()
        };
        let (a, ra) = train::<f64>(&data, &cfg).unwrap();
        let (b, rb) = train::<f64>(&data, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.mean_nll, rb.mean_nll);
        assert_eq!(ra.mean_nll.len(), 2);
        assert!(ra.objective.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_oversized_reference() {
        let data = poisson_data(4, 6);
        let cfg = TrainConfig {
            reference_l: 10,
            batch_size: 2,
            epochs: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(train::<f64>(&data, &cfg), Err(Error::Config(_))));
    }
}
