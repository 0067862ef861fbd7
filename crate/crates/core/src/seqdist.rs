//! Nonparametric distance between event sequences.
//!
//! Each event becomes a `(C+1)`-vector (time, one-hot type). For an index
//! subset `I`, the element kernel `k_I(e, e') = prod_{i in I} (r_i - |e_i - e'_i|)`
//! is a product of triangular kernels and hence positive semidefinite, so
//!
//! ```text
//! d_I(a, b) = sqrt( sum_aa k_I + sum_bb k_I - 2 sum_ab k_I )
//! ```
//!
//! is a maximum mean discrepancy. The sequence distance averages `d_I` over
//! either all `2^(C+1)` subsets or the `C+1` singletons.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EventSequence};
use crate::error::{Error, Result};
use crate::kernel::{median_bandwidth_of, KernelMatrix};
use crate::linalg::Mat;
use crate::scalar::Scalar;

/// Largest `C + 1` for which every subset is enumerated.
pub const MAX_FULL_DIM: usize = 16;

const SNAP_TO_ZERO: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetMode {
    /// All `2^(C+1)` index subsets, including the empty one.
    Full,
    /// The `C+1` single-index subsets.
    #[default]
    Singleton,
}

impl std::str::FromStr for SubsetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(SubsetMode::Full),
            "singleton" => Ok(SubsetMode::Singleton),
            other => Err(Error::Config(format!("unknown subset mode {other:?} (full|singleton)"))),
        }
    }
}

/// Whether the distance enters the Gaussian kernel as is or squared.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistancePower {
    /// `exp(-d / (2 sigma^2))`.
    #[default]
    Unsquared,
    /// `exp(-d^2 / (2 sigma^2))`.
    Squared,
}

/// Counts element-kernel evaluations (one per event pair per subset).
#[derive(Debug, Default)]
pub struct EvalCounter {
    element_evals: AtomicU64,
    pair_evals: AtomicU64,
}

impl EvalCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn element_evaluations(&self) -> u64 {
        self.element_evals.load(Ordering::Relaxed)
    }

    pub fn pair_evaluations(&self) -> u64 {
        self.pair_evals.load(Ordering::Relaxed)
    }

    fn add(&self, elements: u64) {
        self.element_evals.fetch_add(elements, Ordering::Relaxed);
    }

    fn add_pair(&self) {
        self.pair_evals.fetch_add(1, Ordering::Relaxed);
    }
}

/// Symmetric, zero-diagonal matrix of sequence distances.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix<T> {
    entries: Mat<T>,
}

impl<T: Scalar> DistanceMatrix<T> {
    pub fn new(entries: Mat<T>) -> Result<Self> {
        let n = entries.rows();
        if entries.cols() != n {
            return Err(Error::Shape("distance matrix must be square".into()));
        }
        for i in 0..n {
            if entries[(i, i)] != T::zero() {
                return Err(Error::Range(format!("distance diagonal entry {i} is nonzero")));
            }
            for j in 0..i {
                let v = entries[(i, j)];
                if v != entries[(j, i)] || !v.is_finite() || v < T::zero() {
                    return Err(Error::Range(format!("distance entry ({i}, {j}) invalid or asymmetric")));
                }
            }
        }
        Ok(DistanceMatrix { entries })
    }

    pub fn n(&self) -> usize {
        self.entries.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.entries[(i, j)]
    }

    pub fn matrix(&self) -> &Mat<T> {
        &self.entries
    }
}

/// Event vectors of one sequence, stored column-wise: times and type ids.
struct Encoded<T> {
    times: Vec<T>,
    types: Vec<usize>,
}

impl<T: Scalar> Encoded<T> {
    fn new(s: &EventSequence) -> Self {
        Encoded {
            times: s.events().iter().map(|e| T::lit(e.time)).collect(),
            types: s.events().iter().map(|e| e.type_id).collect(),
        }
    }

    fn len(&self) -> usize {
        self.times.len()
    }

    /// Coordinate `i` of event `n`: time for `i = 0`, one-hot entry otherwise.
    #[inline]
    fn coord(&self, n: usize, i: usize) -> T {
        if i == 0 {
            self.times[n]
        } else if self.types[n] == i - 1 {
            T::one()
        } else {
            T::zero()
        }
    }
}

/// `sum_{n, n'} prod_{i in subset} (r_i - |a_n^i - b_n'^i|)`.
fn subset_cross_sum<T: Scalar>(a: &Encoded<T>, b: &Encoded<T>, subset: &[usize], horizon: T) -> T {
    let mut total = T::zero();
    for n in 0..a.len() {
        for m in 0..b.len() {
            let mut prod = T::one();
            for &i in subset {
                let r = if i == 0 { horizon } else { T::one() };
                prod *= r - (a.coord(n, i) - b.coord(m, i)).abs();
            }
            total += prod;
        }
    }
    total
}

/// Cross sums for every singleton `{0}, {1}, ..., {C}`.
fn singleton_cross_sums<T: Scalar>(a: &Encoded<T>, b: &Encoded<T>, num_types: usize, horizon: T) -> Vec<T> {
    let mut sums = vec![T::zero(); num_types + 1];
    // time coordinate
    let mut time_sum = T::zero();
    for &ta in &a.times {
        for &tb in &b.times {
            time_sum += horizon - (ta - tb).abs();
        }
    }
    sums[0] = time_sum;
    // type coordinate i: the factor is 1 exactly when both events agree on
    // "is type i-1", so the sum over pairs reduces to per-type counts
    let (na, nb) = (a.len(), b.len());
    let mut count_a = vec![0usize; num_types];
    let mut count_b = vec![0usize; num_types];
    for &c in &a.types {
        count_a[c] += 1;
    }
    for &c in &b.types {
        count_b[c] += 1;
    }
    for i in 0..num_types {
        let agree = count_a[i] * count_b[i] + (na - count_a[i]) * (nb - count_b[i]);
        sums[i + 1] = T::from_usize_lossy(agree);
    }
    sums
}

/// Cross sums for all `2^(C+1)` subsets, indexed by bitmask over coordinates.
fn full_cross_sums<T: Scalar>(a: &Encoded<T>, b: &Encoded<T>, num_types: usize, horizon: T) -> Vec<T> {
    let dim = num_types + 1;
    let n_subsets = 1usize << dim;
    let mut sums = vec![T::zero(); n_subsets];
    let mut prods = vec![T::one(); n_subsets];
    let mut factors = vec![T::zero(); dim];
    for n in 0..a.len() {
        for m in 0..b.len() {
            for (i, f) in factors.iter_mut().enumerate() {
                let r = if i == 0 { horizon } else { T::one() };
                *f = r - (a.coord(n, i) - b.coord(m, i)).abs();
            }
            for mask in 1..n_subsets {
                let low = mask.trailing_zeros() as usize;
                prods[mask] = prods[mask & (mask - 1)] * factors[low];
            }
            for (s, &p) in sums.iter_mut().zip(&prods) {
                *s += p;
            }
        }
    }
    sums
}

fn cross_sums<T: Scalar>(
    a: &Encoded<T>,
    b: &Encoded<T>,
    mode: SubsetMode,
    num_types: usize,
    horizon: T,
    counter: Option<&EvalCounter>,
) -> Vec<T> {
    let pairs = (a.len() * b.len()) as u64;
    match mode {
        SubsetMode::Singleton => {
            if let Some(c) = counter {
                c.add(pairs * (num_types as u64 + 1));
            }
            singleton_cross_sums(a, b, num_types, horizon)
        }
        SubsetMode::Full => {
            if let Some(c) = counter {
                c.add(pairs << (num_types + 1));
            }
            full_cross_sums(a, b, num_types, horizon)
        }
    }
}

fn mmd_from_sums<T: Scalar>(aa: T, bb: T, ab: T) -> T {
    let radicand = (aa + bb - ab - ab).max(T::zero());
    let d = radicand.sqrt();
    if d < T::lit(SNAP_TO_ZERO) {
        T::zero()
    } else {
        d
    }
}

fn average_distance<T: Scalar>(aa: &[T], bb: &[T], ab: &[T]) -> T {
    let total: T = aa
        .iter()
        .zip(bb)
        .zip(ab)
        .map(|((&x, &y), &z)| mmd_from_sums(x, y, z))
        .sum();
    let d = total / T::from_usize_lossy(aa.len());
    if d < T::lit(SNAP_TO_ZERO) {
        T::zero()
    } else {
        d
    }
}

fn check_mode(mode: SubsetMode, num_types: usize) -> Result<()> {
    if mode == SubsetMode::Full && num_types + 1 > MAX_FULL_DIM {
        return Err(Error::Capability(format!(
            "full subset enumeration needs C+1 <= {MAX_FULL_DIM}, got C+1 = {}",
            num_types + 1
        )));
    }
    Ok(())
}

/// `d_I(a, b)` for an arbitrary index subset of `{0, ..., C}`.
pub fn subset_distance<T: Scalar>(
    a: &EventSequence,
    b: &EventSequence,
    subset: &[usize],
    num_types: usize,
    horizon: f64,
) -> Result<T> {
    if let Some(&i) = subset.iter().find(|&&i| i > num_types) {
        return Err(Error::Range(format!("subset index {i} outside 0..={num_types}")));
    }
    let (ea, eb) = (Encoded::new(a), Encoded::new(b));
    let h = T::lit(horizon);
    Ok(mmd_from_sums(
        subset_cross_sum(&ea, &ea, subset, h),
        subset_cross_sum(&eb, &eb, subset, h),
        subset_cross_sum(&ea, &eb, subset, h),
    ))
}

/// Subset-averaged distance between two sequences.
pub fn pair_distance<T: Scalar>(
    a: &EventSequence,
    b: &EventSequence,
    mode: SubsetMode,
    num_types: usize,
    horizon: f64,
) -> Result<T> {
    pair_distance_counted(a, b, mode, num_types, horizon, None)
}

pub fn pair_distance_counted<T: Scalar>(
    a: &EventSequence,
    b: &EventSequence,
    mode: SubsetMode,
    num_types: usize,
    horizon: f64,
    counter: Option<&EvalCounter>,
) -> Result<T> {
    check_mode(mode, num_types)?;
    let (ea, eb) = (Encoded::new(a), Encoded::new(b));
    let h = T::lit(horizon);
    let aa = cross_sums(&ea, &ea, mode, num_types, h, counter);
    let bb = cross_sums(&eb, &eb, mode, num_types, h, counter);
    let ab = cross_sums(&ea, &eb, mode, num_types, h, counter);
    if let Some(c) = counter {
        c.add_pair();
    }
    Ok(average_distance(&aa, &bb, &ab))
}

/// All pairwise distances. Within-sequence sums are computed once per
/// sequence and each unordered pair once; the matrix is then mirrored.
pub fn distance_matrix<T: Scalar>(
    sequences: &[EventSequence],
    mode: SubsetMode,
    num_types: usize,
    horizon: f64,
) -> Result<DistanceMatrix<T>> {
    distance_matrix_counted(sequences, mode, num_types, horizon, None)
}

pub fn distance_matrix_counted<T: Scalar>(
    sequences: &[EventSequence],
    mode: SubsetMode,
    num_types: usize,
    horizon: f64,
    counter: Option<&EvalCounter>,
) -> Result<DistanceMatrix<T>> {
    check_mode(mode, num_types)?;
    let n = sequences.len();
    if n < 2 {
        return Err(Error::Range(format!("distance matrix needs at least 2 sequences, got {n}")));
    }
    let h = T::lit(horizon);
    let encoded: Vec<Encoded<T>> = sequences.iter().map(Encoded::new).collect();
    let self_sums: Vec<Vec<T>> = encoded
        .par_iter()
        .map(|e| cross_sums(e, e, mode, num_types, h, counter))
        .collect();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect();
    let values: Vec<T> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let ab = cross_sums(&encoded[i], &encoded[j], mode, num_types, h, counter);
            if let Some(c) = counter {
                c.add_pair();
            }
            average_distance(&self_sums[i], &self_sums[j], &ab)
        })
        .collect();
    let mut m = Mat::zeros(n, n);
    for (&(i, j), &v) in pairs.iter().zip(&values) {
        m[(i, j)] = v;
        m[(j, i)] = v;
    }
    Ok(DistanceMatrix { entries: m })
}

/// Median heuristic over the off-diagonal distances.
pub fn median_bandwidth<T: Scalar>(d: &DistanceMatrix<T>) -> T {
    median_bandwidth_of(&d.entries)
}

/// `exp(-d / (2 sigma^2))`, or with `d^2` under [`DistancePower::Squared`].
pub fn kernel_from_distances<T: Scalar>(d: &DistanceMatrix<T>, sigma: T, power: DistancePower) -> Result<KernelMatrix<T>> {
    if !(sigma > T::zero() && sigma.is_finite()) {
        return Err(Error::Range(format!("bandwidth must be positive, got {sigma}")));
    }
    let denom = T::lit(2.0) * sigma * sigma;
    Ok(KernelMatrix::from_exponents(d.n(), |i, j| {
        let v = d.get(i, j);
        match power {
            DistancePower::Unsquared => v / denom,
            DistancePower::Squared => v * v / denom,
        }
    }))
}

/// Distance matrix, median bandwidth and kernel over a list of sequences.
pub fn nonparametric_kernel<T: Scalar>(
    sequences: &[EventSequence],
    mode: SubsetMode,
    power: DistancePower,
    num_types: usize,
    horizon: f64,
) -> Result<KernelMatrix<T>> {
    let d = distance_matrix::<T>(sequences, mode, num_types, horizon)?;
    let sigma = median_bandwidth(&d);
    kernel_from_distances(&d, sigma, power)
}

/// Reference kernel over `l` sequences drawn uniformly without replacement.
/// Returns the kernel and the dataset indices it covers, in kernel order.
pub fn sample_reference_kernel<T: Scalar>(
    dataset: &Dataset,
    l: usize,
    mode: SubsetMode,
    power: DistancePower,
    seed: u64,
) -> Result<(KernelMatrix<T>, Vec<usize>)> {
    let m = dataset.len();
    if l < 2 || l > m {
        return Err(Error::Range(format!("reference size L = {l} must lie in [2, {m}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = sample(&mut rng, m, l).into_vec();
    let chosen = dataset.select(&indices);
    let kernel = nonparametric_kernel(&chosen, mode, power, dataset.num_types(), dataset.horizon())?;
    Ok((kernel, indices))
}
