//! Recurrent temporal point process with exponential-drift intensities.
//!
//! Each event `(t_n, c_n)` is fed to a GRU cell as `[embed(c_n); ln(1 + dt_n)]`.
//! Between events the per-type intensity is
//!
//! ```text
//! lambda_c(t) = exp(w_c . h_n + alpha_c (t - t_n) + b_c)
//! ```
//!
//! where `h_n` is the state after the last event before `t` (`h_0 = 0`,
//! `t_0 = 0`). The compensator has a closed form on each interval, so the
//! log-likelihood and its gradient are exact. Gradients are obtained by a
//! hand-written reverse pass through the intensities, the compensators, the
//! mean pooling and the recurrence.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EventSequence};
use crate::error::{Error, Result};
use crate::kernel::{median_bandwidth_of, KernelMatrix};
use crate::linalg::{dot, squared_distance, Mat};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const DRIFT_LIMIT: f64 = 10.0;
const SERIES_THRESHOLD: f64 = 1e-4;
const INIT_SCALE: f64 = 0.1;

/// Number of gates in the recurrent cell (update, reset, candidate).
const GATES: usize = 3;
const UPDATE: usize = 0;
const RESET: usize = 1;
const CANDIDATE: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TppDims {
    pub num_types: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    type_embedding: Range<usize>,
    gate_input: Range<usize>,
    gate_state: Range<usize>,
    gate_bias: Range<usize>,
    head_weight: Range<usize>,
    head_drift: Range<usize>,
    head_bias: Range<usize>,
}

impl TppDims {
    pub fn new(num_types: usize, embed_dim: usize, hidden_dim: usize) -> Self {
        TppDims {
            num_types,
            embed_dim,
            hidden_dim,
        }
    }

    #[inline]
    fn input_dim(&self) -> usize {
        self.embed_dim + 1
    }

    fn layout(&self) -> Layout {
        let (c, e, d) = (self.num_types, self.embed_dim, self.hidden_dim);
        let mut at = 0;
        let mut take = |len: usize| {
            let r = at..at + len;
            at += len;
            r
        };
        Layout {
            type_embedding: take(c * e),
            gate_input: take(GATES * d * (e + 1)),
            gate_state: take(GATES * d * d),
            gate_bias: take(GATES * d),
            head_weight: take(c * d),
            head_drift: take(c),
            head_bias: take(c),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.layout().head_bias.end
    }

    fn validate(&self) -> Result<()> {
        if self.num_types == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(format!("model dimensions must be positive, got {self:?}")));
        }
        Ok(())
    }
}

/// Flat parameter vector of the recurrent model.
#[derive(Clone, Debug, PartialEq)]
pub struct TppParams<T> {
    dims: TppDims,
    layout: Layout,
    values: Vec<T>,
}

/// Gradient with the same layout as [`TppParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle<T> {
    pub dims: TppDims,
    pub values: Vec<T>,
}

impl<T: Scalar> GradientBundle<T> {
    pub fn zeros(dims: TppDims) -> Self {
        GradientBundle {
            dims,
            values: vec![T::zero(); dims.num_parameters()],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSequence<T> {
    /// Row `n` is the state after consuming event `n`.
    pub hidden_states: Mat<T>,
    /// Mean of the hidden-state rows.
    pub sequence_embedding: Vec<T>,
}

impl<T: Scalar> TppParams<T> {
    pub fn zeros(dims: TppDims) -> Result<Self> {
        dims.validate()?;
        Ok(TppParams {
            dims,
            layout: dims.layout(),
            values: vec![T::zero(); dims.num_parameters()],
        })
    }

    /// Uniform `[-0.1, 0.1]` weights; intensity biases start at `ln(mean_rate)`.
    pub fn init(dims: TppDims, mean_rate: f64, seed: u64) -> Result<Self> {
        if !(mean_rate > 0.0 && mean_rate.is_finite()) {
            return Err(Error::Config(format!("mean rate {mean_rate} must be positive")));
        }
        let mut p = Self::zeros(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in p.values.iter_mut() {
            *v = T::lit(rng.gen_range(-INIT_SCALE..=INIT_SCALE));
        }
        let log_rate = T::lit(mean_rate.ln());
        for v in p.values[p.layout.head_bias.clone()].iter_mut() {
            *v = log_rate;
        }
        Ok(p)
    }

    /// [`TppParams::init`] with the dataset's average per-type rate.
    pub fn init_for_dataset(dataset: &Dataset, embed_dim: usize, hidden_dim: usize, seed: u64) -> Result<Self> {
        let dims = TppDims::new(dataset.num_types(), embed_dim, hidden_dim);
        let mean_events = dataset.total_events() as f64 / dataset.len() as f64;
        let rate = mean_events / (dataset.num_types() as f64 * dataset.horizon());
        Self::init(dims, rate, seed)
    }

    pub fn from_values(dims: TppDims, values: Vec<T>) -> Result<Self> {
        dims.validate()?;
        if values.len() != dims.num_parameters() {
            return Err(Error::Shape(format!(
                "{} parameters given, {dims:?} needs {}",
                values.len(),
                dims.num_parameters()
            )));
        }
        Ok(TppParams {
            dims,
            layout: dims.layout(),
            values,
        })
    }

    #[inline]
    pub fn dims(&self) -> TppDims {
        self.dims
    }

    #[inline]
    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    #[inline]
    fn type_embedding(&self, c: usize) -> &[T] {
        let e = self.dims.embed_dim;
        &self.values[self.layout.type_embedding.start + c * e..][..e]
    }

    /// Row `d` of gate `g`'s input map.
    #[inline]
    fn gate_input_row(&self, g: usize, d: usize) -> &[T] {
        let k = self.dims.input_dim();
        let h = self.dims.hidden_dim;
        &self.values[self.layout.gate_input.start + (g * h + d) * k..][..k]
    }

    #[inline]
    fn gate_state_row(&self, g: usize, d: usize) -> &[T] {
        let h = self.dims.hidden_dim;
        &self.values[self.layout.gate_state.start + (g * h + d) * h..][..h]
    }

    #[inline]
    fn gate_bias(&self, g: usize, d: usize) -> T {
        self.values[self.layout.gate_bias.start + g * self.dims.hidden_dim + d]
    }

    #[inline]
    fn head_weight(&self, c: usize) -> &[T] {
        let h = self.dims.hidden_dim;
        &self.values[self.layout.head_weight.start + c * h..][..h]
    }

    #[inline]
    fn head_drift(&self, c: usize) -> T {
        self.values[self.layout.head_drift.start + c]
    }

    #[inline]
    fn head_bias(&self, c: usize) -> T {
        self.values[self.layout.head_bias.start + c]
    }

    /// Sets every intensity head to the constant rate `exp(bias[c])`.
    pub fn set_constant_intensity(&mut self, log_rates: &[T]) {
        for v in self.values[self.layout.head_weight.clone()].iter_mut() {
            *v = T::zero();
        }
        for v in self.values[self.layout.head_drift.clone()].iter_mut() {
            *v = T::zero();
        }
        self.values[self.layout.head_bias.clone()].copy_from_slice(log_rates);
    }

    /// Clamps the drift terms to `[-10, 10]`.
    pub fn clamp_drift(&mut self) {
        let lim = T::lit(DRIFT_LIMIT);
        for v in self.values[self.layout.head_drift.clone()].iter_mut() {
            *v = v.max(-lim).min(lim);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let grab = |r: &Range<usize>| self.values[r.clone()].iter().map(|v| v.as_f64()).collect();
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            num_types: self.dims.num_types,
            embed_dim: self.dims.embed_dim,
            hidden_dim: self.dims.hidden_dim,
            type_embedding: grab(&self.layout.type_embedding),
            gate_input: grab(&self.layout.gate_input),
            gate_state: grab(&self.layout.gate_state),
            gate_bias: grab(&self.layout.gate_bias),
            head_weight: grab(&self.layout.head_weight),
            head_drift: grab(&self.layout.head_drift),
            head_bias: grab(&self.layout.head_bias),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint format version {} unsupported (expected {CHECKPOINT_FORMAT_VERSION})",
                ck.format_version
            )));
        }
        let dims = TppDims::new(ck.num_types, ck.embed_dim, ck.hidden_dim);
        let mut p = Self::zeros(dims)?;
        let layout = p.layout.clone();
        let blocks: [(&str, &Vec<f64>, Range<usize>); 7] = [
            ("type_embedding", &ck.type_embedding, layout.type_embedding),
            ("gate_input", &ck.gate_input, layout.gate_input),
            ("gate_state", &ck.gate_state, layout.gate_state),
            ("gate_bias", &ck.gate_bias, layout.gate_bias),
            ("head_weight", &ck.head_weight, layout.head_weight),
            ("head_drift", &ck.head_drift, layout.head_drift),
            ("head_bias", &ck.head_bias, layout.head_bias),
        ];
        for (name, src, range) in blocks {
            if src.len() != range.len() {
                return Err(Error::Shape(format!(
                    "checkpoint block {name} has {} values, expected {}",
                    src.len(),
                    range.len()
                )));
            }
            for (dst, &v) in p.values[range].iter_mut().zip(src) {
                if !v.is_finite() {
                    return Err(Error::Numerical(format!("checkpoint block {name} holds a non-finite value")));
                }
                *dst = T::lit(v);
            }
        }
        Ok(p)
    }
}

/// Serialized model: dimensions plus one flat array per parameter block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub num_types: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub type_embedding: Vec<f64>,
    pub gate_input: Vec<f64>,
    pub gate_state: Vec<f64>,
    pub gate_bias: Vec<f64>,
    pub head_weight: Vec<f64>,
    pub head_drift: Vec<f64>,
    pub head_bias: Vec<f64>,
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `int_0^delta exp(a + alpha s) ds` and its derivative in `alpha`
/// (the derivative in `a` equals the value).
#[inline]
pub fn interval_integral<T: Scalar>(a: T, alpha: T, delta: T) -> (T, T) {
    let x = alpha * delta;
    let ea = a.exp();
    if x.abs() < T::lit(SERIES_THRESHOLD) {
        let half = T::lit(0.5);
        let third = T::lit(1.0 / 3.0);
        let sixth = T::lit(1.0 / 6.0);
        let value = ea * delta * (T::one() + x * half + x * x * sixth);
        let d_alpha = ea * delta * delta * (half + x * third);
        (value, d_alpha)
    } else {
        let value = ea * x.exp_m1() / alpha;
        let d_alpha = (ea * delta * x.exp() - value) / alpha;
        (value, d_alpha)
    }
}

/// Cached activations of one recurrent step.
#[derive(Clone, Debug)]
struct StepCache<T> {
    input: Vec<T>,
    update: Vec<T>,
    reset: Vec<T>,
    candidate: Vec<T>,
    reset_state: Vec<T>,
}

/// Everything the reverse pass needs for one sequence.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    /// `states[k]` is `h_k`; `states[0] = 0`.
    states: Vec<Vec<T>>,
    /// Length of interval `k` (from `t_k` to `t_{k+1}`, the last one to the horizon).
    gaps: Vec<T>,
    steps: Vec<StepCache<T>>,
}

/// Interface a backbone offers to training and evaluation.
pub trait Backbone<T: Scalar>: Clone + Send + Sync {
    fn num_types(&self) -> usize;

    fn embedding_dim(&self) -> usize;

    fn parameters(&self) -> &[T];

    fn parameters_mut(&mut self) -> &mut [T];

    /// Restores parameter constraints after an update.
    fn project(&mut self) {}

    fn encode(&self, seq: &EventSequence) -> EncodedSequence<T>;

    /// `lambda_c(t)` given the events strictly before `t`.
    fn intensity(&self, encoded: &EncodedSequence<T>, seq: &EventSequence, type_id: usize, t: f64) -> T;

    /// Log-likelihood, encoding, and a tape for [`Backbone::backward`].
    fn forward(&self, seq: &EventSequence) -> (T, EncodedSequence<T>, Tape<T>);

    /// Accumulates the gradient of `ll_weight * loglik + <d_embedding, embedding>`.
    fn backward(&self, seq: &EventSequence, tape: &Tape<T>, ll_weight: T, d_embedding: Option<&[T]>, grad: &mut [T]);

    fn log_likelihood(&self, seq: &EventSequence) -> T {
        self.forward(seq).0
    }

    /// Per-type log-intensities at each event time from the strict history;
    /// row `n` belongs to event `n`.
    fn event_log_intensities(&self, seq: &EventSequence) -> Vec<Vec<T>>;
}

impl<T: Scalar> TppParams<T> {
    fn step(&self, h_prev: &[T], input: Vec<T>) -> (Vec<T>, StepCache<T>) {
        let d = self.dims.hidden_dim;
        let mut update = vec![T::zero(); d];
        let mut reset = vec![T::zero(); d];
        for j in 0..d {
            update[j] = sigmoid(
                dot(self.gate_input_row(UPDATE, j), &input) + dot(self.gate_state_row(UPDATE, j), h_prev) + self.gate_bias(UPDATE, j),
            );
            reset[j] = sigmoid(
                dot(self.gate_input_row(RESET, j), &input) + dot(self.gate_state_row(RESET, j), h_prev) + self.gate_bias(RESET, j),
            );
        }
        let reset_state: Vec<T> = reset.iter().zip(h_prev).map(|(&r, &h)| r * h).collect();
        let mut candidate = vec![T::zero(); d];
        let mut h = vec![T::zero(); d];
        for j in 0..d {
            candidate[j] = (dot(self.gate_input_row(CANDIDATE, j), &input)
                + dot(self.gate_state_row(CANDIDATE, j), &reset_state)
                + self.gate_bias(CANDIDATE, j))
            .tanh();
            h[j] = (T::one() - update[j]) * candidate[j] + update[j] * h_prev[j];
        }
        (
            h,
            StepCache {
                input,
                update,
                reset,
                candidate,
                reset_state,
            },
        )
    }

    fn input_for(&self, type_id: usize, gap: T) -> Vec<T> {
        let mut x = Vec::with_capacity(self.dims.input_dim());
        x.extend_from_slice(self.type_embedding(type_id));
        x.push(gap.ln_1p());
        x
    }

    #[inline]
    fn log_intensity_base(&self, c: usize, h: &[T]) -> T {
        dot(self.head_weight(c), h) + self.head_bias(c)
    }

    /// Reverse pass through one recurrent step. Adds parameter gradients to
    /// `grad` and returns the gradient with respect to the previous state.
    fn step_backward(&self, h_prev: &[T], cache: &StepCache<T>, type_id: usize, dh: &[T], grad: &mut [T]) -> Vec<T> {
        let d = self.dims.hidden_dim;
        let k = self.dims.input_dim();
        let lay = &self.layout;
        let mut dh_prev = vec![T::zero(); d];
        let mut dx = vec![T::zero(); k];
        let mut d_pre_update = vec![T::zero(); d];
        let mut d_pre_candidate = vec![T::zero(); d];
        for j in 0..d {
            let z = cache.update[j];
            let n = cache.candidate[j];
            d_pre_update[j] = dh[j] * (h_prev[j] - n) * z * (T::one() - z);
            d_pre_candidate[j] = dh[j] * (T::one() - z) * (T::one() - n * n);
            dh_prev[j] += dh[j] * z;
        }
        // candidate gate: reads the reset-gated state
        let mut d_reset_state = vec![T::zero(); d];
        for j in 0..d {
            let g = d_pre_candidate[j];
            if g == T::zero() {
                continue;
            }
            let in_row = lay.gate_input.start + (CANDIDATE * d + j) * k;
            for (q, &x) in cache.input.iter().enumerate() {
                grad[in_row + q] += g * x;
                dx[q] += g * self.values[in_row + q];
            }
            let st_row = lay.gate_state.start + (CANDIDATE * d + j) * d;
            for q in 0..d {
                grad[st_row + q] += g * cache.reset_state[q];
                d_reset_state[q] += g * self.values[st_row + q];
            }
            grad[lay.gate_bias.start + CANDIDATE * d + j] += g;
        }
        let mut d_pre_reset = vec![T::zero(); d];
        for q in 0..d {
            let r = cache.reset[q];
            dh_prev[q] += d_reset_state[q] * r;
            d_pre_reset[q] = d_reset_state[q] * h_prev[q] * r * (T::one() - r);
        }
        for (gate, d_pre) in [(UPDATE, &d_pre_update), (RESET, &d_pre_reset)] {
            for j in 0..d {
                let g = d_pre[j];
                if g == T::zero() {
                    continue;
                }
                let in_row = lay.gate_input.start + (gate * d + j) * k;
                for (q, &x) in cache.input.iter().enumerate() {
                    grad[in_row + q] += g * x;
                    dx[q] += g * self.values[in_row + q];
                }
                let st_row = lay.gate_state.start + (gate * d + j) * d;
                for q in 0..d {
                    grad[st_row + q] += g * h_prev[q];
                    dh_prev[q] += g * self.values[st_row + q];
                }
                grad[lay.gate_bias.start + gate * d + j] += g;
            }
        }
        // the last input coordinate is the time feature, which is data
        let e = self.dims.embed_dim;
        let emb = lay.type_embedding.start + type_id * e;
        for q in 0..e {
            grad[emb + q] += dx[q];
        }
        dh_prev
    }
}

impl<T: Scalar> Backbone<T> for TppParams<T> {
    fn num_types(&self) -> usize {
        self.dims.num_types
    }

    fn embedding_dim(&self) -> usize {
        self.dims.hidden_dim
    }

    fn parameters(&self) -> &[T] {
        &self.values
    }

    fn parameters_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    fn project(&mut self) {
        self.clamp_drift();
    }

    fn encode(&self, seq: &EventSequence) -> EncodedSequence<T> {
        let d = self.dims.hidden_dim;
        let n = seq.len();
        let mut hidden = Mat::zeros(n, d);
        let mut h = vec![T::zero(); d];
        let mut t_prev = T::zero();
        for (i, e) in seq.events().iter().enumerate() {
            let t = T::lit(e.time);
            let (next, _) = self.step(&h, self.input_for(e.type_id, t - t_prev));
            hidden.row_mut(i).copy_from_slice(&next);
            h = next;
            t_prev = t;
        }
        let embedding = mean_rows(&hidden);
        EncodedSequence {
            hidden_states: hidden,
            sequence_embedding: embedding,
        }
    }

    fn intensity(&self, encoded: &EncodedSequence<T>, seq: &EventSequence, type_id: usize, t: f64) -> T {
        let n = seq.events().partition_point(|e| e.time < t);
        let (h, t_last) = if n == 0 {
            (vec![T::zero(); self.dims.hidden_dim], T::zero())
        } else {
            (encoded.hidden_states.row(n - 1).to_vec(), T::lit(seq.events()[n - 1].time))
        };
        (self.log_intensity_base(type_id, &h) + self.head_drift(type_id) * (T::lit(t) - t_last)).exp()
    }

    fn forward(&self, seq: &EventSequence) -> (T, EncodedSequence<T>, Tape<T>) {
        let d = self.dims.hidden_dim;
        let c_count = self.dims.num_types;
        let n = seq.len();
        let mut states = Vec::with_capacity(n + 1);
        let mut gaps = Vec::with_capacity(n + 1);
        let mut steps = Vec::with_capacity(n);
        states.push(vec![T::zero(); d]);
        let mut ll = T::zero();
        let mut compensator = T::zero();
        let mut t_prev = T::zero();
        for e in seq.events() {
            let t = T::lit(e.time);
            let gap = t - t_prev;
            let h = states.last().expect("initial state");
            for c in 0..c_count {
                let a = self.log_intensity_base(c, h);
                compensator += interval_integral(a, self.head_drift(c), gap).0;
            }
            ll += self.log_intensity_base(e.type_id, h) + self.head_drift(e.type_id) * gap;
            let (next, cache) = self.step(h, self.input_for(e.type_id, gap));
            gaps.push(gap);
            steps.push(cache);
            states.push(next);
            t_prev = t;
        }
        let tail = T::lit(seq.horizon()) - t_prev;
        let h = states.last().expect("final state");
        for c in 0..c_count {
            let a = self.log_intensity_base(c, h);
            compensator += interval_integral(a, self.head_drift(c), tail).0;
        }
        gaps.push(tail);
        ll -= compensator;

        let mut hidden = Mat::zeros(n, d);
        for i in 0..n {
            hidden.row_mut(i).copy_from_slice(&states[i + 1]);
        }
        let embedding = mean_rows(&hidden);
        (
            ll,
            EncodedSequence {
                hidden_states: hidden,
                sequence_embedding: embedding,
            },
            Tape { states, gaps, steps },
        )
    }

    fn backward(&self, seq: &EventSequence, tape: &Tape<T>, ll_weight: T, d_embedding: Option<&[T]>, grad: &mut [T]) {
        debug_assert_eq!(grad.len(), self.values.len());
        let d = self.dims.hidden_dim;
        let c_count = self.dims.num_types;
        let n = seq.len();
        let lay = &self.layout;
        let mut dh: Vec<Vec<T>> = vec![vec![T::zero(); d]; n + 1];

        if ll_weight != T::zero() {
            for k in 0..=n {
                let h = &tape.states[k];
                let gap = tape.gaps[k];
                for c in 0..c_count {
                    let alpha = self.head_drift(c);
                    let a = self.log_intensity_base(c, h);
                    let (value, d_alpha) = interval_integral(a, alpha, gap);
                    let mut da = -ll_weight * value;
                    let mut dalpha = -ll_weight * d_alpha;
                    if k < n && seq.events()[k].type_id == c {
                        da += ll_weight;
                        dalpha += ll_weight * gap;
                    }
                    grad[lay.head_bias.start + c] += da;
                    grad[lay.head_drift.start + c] += dalpha;
                    let w_row = lay.head_weight.start + c * d;
                    for q in 0..d {
                        grad[w_row + q] += da * h[q];
                        dh[k][q] += da * self.values[w_row + q];
                    }
                }
            }
        }
        if let Some(de) = d_embedding {
            let inv = T::one() / T::from_usize_lossy(n);
            for row in dh.iter_mut().skip(1) {
                for (r, &g) in row.iter_mut().zip(de) {
                    *r += g * inv;
                }
            }
        }
        for k in (1..=n).rev() {
            let back = self.step_backward(&tape.states[k - 1], &tape.steps[k - 1], seq.events()[k - 1].type_id, &dh[k], grad);
            for (p, b) in dh[k - 1].iter_mut().zip(back) {
                *p += b;
            }
        }
    }

    fn event_log_intensities(&self, seq: &EventSequence) -> Vec<Vec<T>> {
        let d = self.dims.hidden_dim;
        let mut h = vec![T::zero(); d];
        let mut t_prev = T::zero();
        let mut out = Vec::with_capacity(seq.len());
        for e in seq.events() {
            let t = T::lit(e.time);
            let gap = t - t_prev;
            out.push(
                (0..self.dims.num_types)
                    .map(|c| self.log_intensity_base(c, &h) + self.head_drift(c) * gap)
                    .collect(),
            );
            h = self.step(&h, self.input_for(e.type_id, gap)).0;
            t_prev = t;
        }
        out
    }
}

fn mean_rows<T: Scalar>(m: &Mat<T>) -> Vec<T> {
    let mut out = vec![T::zero(); m.cols()];
    for i in 0..m.rows() {
        for (o, &v) in out.iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    let inv = T::one() / T::from_usize_lossy(m.rows().max(1));
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

pub fn encode<T: Scalar, B: Backbone<T>>(model: &B, seq: &EventSequence) -> EncodedSequence<T> {
    model.encode(seq)
}

pub fn log_likelihood<T: Scalar, B: Backbone<T>>(model: &B, seq: &EventSequence) -> T {
    model.log_likelihood(seq)
}

/// Forward passes over a batch, in batch order.
pub fn forward_batch<T: Scalar, B: Backbone<T>>(model: &B, batch: &[EventSequence]) -> Vec<(T, EncodedSequence<T>, Tape<T>)> {
    batch.par_iter().map(|s| model.forward(s)).collect()
}

/// Reverse passes over a batch; per-sequence gradients are summed in batch
/// order so the result is independent of scheduling.
pub fn backward_batch<T: Scalar, B: Backbone<T>>(
    model: &B,
    batch: &[EventSequence],
    tapes: &[Tape<T>],
    ll_weight: T,
    d_embeddings: Option<&[Vec<T>]>,
) -> Vec<T> {
    let n_params = model.parameters().len();
    let parts: Vec<Vec<T>> = batch
        .par_iter()
        .zip(tapes.par_iter())
        .enumerate()
        .map(|(i, (s, tape))| {
            let mut g = vec![T::zero(); n_params];
            model.backward(s, tape, ll_weight, d_embeddings.map(|d| d[i].as_slice()), &mut g);
            g
        })
        .collect();
    let mut total = vec![T::zero(); n_params];
    for part in parts {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    total
}

/// Mean negative log-likelihood over the batch, its gradient, and the encodings.
pub fn nll_and_grad<T: Scalar>(
    params: &TppParams<T>,
    batch: &[EventSequence],
) -> Result<(T, GradientBundle<T>, Vec<EncodedSequence<T>>)> {
    if batch.is_empty() {
        return Err(Error::Range("empty batch".into()));
    }
    let (nll, grad, encoded) = nll_and_grad_generic(params, batch);
    Ok((
        nll,
        GradientBundle {
            dims: params.dims(),
            values: grad,
        },
        encoded,
    ))
}

pub(crate) fn nll_and_grad_generic<T: Scalar, B: Backbone<T>>(model: &B, batch: &[EventSequence]) -> (T, Vec<T>, Vec<EncodedSequence<T>>) {
    let passes = forward_batch(model, batch);
    let inv = T::one() / T::from_usize_lossy(batch.len());
    let mut nll = T::zero();
    let mut encoded = Vec::with_capacity(batch.len());
    let mut tapes = Vec::with_capacity(batch.len());
    for (ll, enc, tape) in passes {
        nll -= ll;
        encoded.push(enc);
        tapes.push(tape);
    }
    let grad = backward_batch(model, batch, &tapes, -inv, None);
    (nll * inv, grad, encoded)
}

/// Median of pairwise embedding distances, with the same fallbacks as the
/// nonparametric bandwidth.
pub fn embedding_bandwidth<T: Scalar>(embeddings: &[Vec<T>]) -> T {
    let n = embeddings.len();
    let d = Mat::from_fn(n, n, |i, j| squared_distance(&embeddings[i], &embeddings[j]).sqrt());
    median_bandwidth_of(&d)
}

/// Gaussian kernel over sequence embeddings.
pub fn embedding_kernel<T: Scalar>(encodings: &[EncodedSequence<T>], sigma: T) -> Result<KernelMatrix<T>> {
    if encodings.len() < 2 {
        return Err(Error::Range("embedding kernel needs at least 2 sequences".into()));
    }
    if !(sigma > T::zero() && sigma.is_finite()) {
        return Err(Error::Range(format!("bandwidth must be positive, got {sigma}")));
    }
    let points: Vec<Vec<T>> = encodings.iter().map(|e| e.sequence_embedding.clone()).collect();
    Ok(KernelMatrix::gaussian(&points, sigma))
}

/// Pulls a gradient on kernel entries back to the embeddings, with `sigma`
/// held fixed. `d_kernel[i][j]` is the derivative with respect to entry
/// `(i, j)` treated as an independent variable.
pub fn embedding_kernel_backward<T: Scalar>(
    embeddings: &[Vec<T>],
    kernel: &KernelMatrix<T>,
    sigma: T,
    d_kernel: &Mat<T>,
) -> Vec<Vec<T>> {
    let n = embeddings.len();
    let dim = embeddings.first().map_or(0, Vec::len);
    let inv = T::one() / (sigma * sigma);
    let mut out = vec![vec![T::zero(); dim]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let g = (d_kernel[(i, j)] + d_kernel[(j, i)]) * kernel.get(i, j) * inv;
            for q in 0..dim {
                out[i][q] -= g * (embeddings[i][q] - embeddings[j][q]);
            }
        }
    }
    out
}
