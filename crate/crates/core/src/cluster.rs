//! Normalized spectral clustering and partition agreement metrics.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernel::KernelMatrix;
use crate::linalg::{squared_distance, symmetric_eigen, Mat};
use crate::scalar::Scalar;
use crate::seqdist::{distance_matrix, kernel_from_distances, median_bandwidth, DistancePower, SubsetMode};

pub const KMEANS_RESTARTS: usize = 20;
const LLOYD_MAX_ITERS: usize = 300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringReport {
    pub predicted_labels: Vec<usize>,
    pub nmi: f64,
    pub rand_index: f64,
    pub k: usize,
}

impl ClusteringReport {
    /// Scores predicted labels against ground truth.
    pub fn score(predicted: Vec<usize>, truth: &[usize], k: usize) -> Result<Self> {
        Ok(ClusteringReport {
            nmi: nmi(&predicted, truth)?,
            rand_index: rand_index(&predicted, truth)?,
            predicted_labels: predicted,
            k,
        })
    }
}

/// Ng-Jordan-Weiss spectral clustering: symmetric degree normalization, the
/// top-`k` eigenvectors, unit-length rows, then k-means++ with 20 restarts.
/// Labels are renumbered in order of first appearance.
pub fn spectral_cluster<T: Scalar>(kernel: &KernelMatrix<T>, k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = kernel.n();
    if k < 2 || k > n {
        return Err(Error::Range(format!("cluster count k = {k} must lie in [2, {n}]")));
    }
    let degree_root: Vec<T> = kernel.matrix().row_sums().into_iter().map(|d| d.sqrt()).collect();
    let normalized = Mat::from_fn(n, n, |i, j| kernel.get(i, j) / (degree_root[i] * degree_root[j]));
    // enforce exact symmetry after the division
    let normalized = Mat::from_fn(n, n, |i, j| if i <= j { normalized[(i, j)] } else { normalized[(j, i)] });
    let eig = symmetric_eigen(&normalized).map_err(|e| {
        let min_degree = degree_root.iter().fold(T::infinity(), |a, &b| a.min(b * b));
        Error::Numerical(format!(
            "spectral embedding failed on a {n}x{n} normalized kernel (smallest degree {min_degree}): {e}"
        ))
    })?;
    let points: Vec<Vec<T>> = (0..n)
        .map(|i| {
            let row: Vec<T> = (0..k).map(|c| eig.vectors[(i, c)]).collect();
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm > T::zero() {
                row.into_iter().map(|v| v / norm).collect()
            } else {
                row
            }
        })
        .collect();
    Ok(canonical_labels(&kmeans(&points, k, seed, KMEANS_RESTARTS)))
}

/// Renumbers labels by order of first appearance.
pub fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map = BTreeMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

/// Best-of-`restarts` k-means. Restart `r` draws from stream `r` of `seed`;
/// the lowest cost wins, ties going to the lowest restart index.
pub fn kmeans<T: Scalar>(points: &[Vec<T>], k: usize, seed: u64, restarts: usize) -> Vec<usize> {
    let runs: Vec<(T, Vec<usize>)> = (0..restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            lloyd(points, k, &mut rng)
        })
        .collect();
    let mut best = 0;
    for (i, run) in runs.iter().enumerate() {
        if run.0 < runs[best].0 {
            best = i;
        }
    }
    runs.into_iter().nth(best).map(|r| r.1).unwrap_or_default()
}

fn nearest<T: Scalar>(p: &[T], centers: &[Vec<T>]) -> (usize, T) {
    let mut best = (0, squared_distance(p, &centers[0]));
    for (c, center) in centers.iter().enumerate().skip(1) {
        let d = squared_distance(p, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn seed_centers<T: Scalar, R: Rng>(points: &[Vec<T>], k: usize, rng: &mut R) -> Vec<Vec<T>> {
    let n = points.len();
    let mut centers = vec![points[rng.gen_range(0..n)].clone()];
    let mut d2: Vec<T> = points.iter().map(|p| squared_distance(p, &centers[0])).collect();
    while centers.len() < k {
        let total: T = d2.iter().copied().sum();
        let pick = if total > T::zero() {
            let target = T::lit(rng.gen::<f64>()) * total;
            let mut acc = T::zero();
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > T::zero() {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centers.push(points[pick].clone());
        let last = centers.last().expect("just pushed");
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, last));
        }
    }
    centers
}

fn lloyd<T: Scalar, R: Rng>(points: &[Vec<T>], k: usize, rng: &mut R) -> (T, Vec<usize>) {
    let dim = points[0].len();
    let mut centers = seed_centers(points, k, rng);
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
    for _ in 0..LLOYD_MAX_ITERS {
        let mut sums = vec![vec![T::zero(); dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, &v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = T::one() / T::from_usize_lossy(counts[c]);
                centers[c] = sums[c].iter().map(|&s| s * inv).collect();
            }
        }
        // an empty cluster takes the point farthest from its own center
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..points.len())
                .map(|i| (i, squared_distance(&points[i], &centers[labels[i]])))
                .fold((0, T::neg_infinity()), |a, b| if b.1 > a.1 { b } else { a })
                .0;
            counts[labels[far]] -= 1;
            labels[far] = c;
            counts[c] = 1;
            centers[c] = points[far].clone();
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    let cost = points.iter().zip(&labels).map(|(p, &l)| squared_distance(p, &centers[l])).sum();
    (cost, labels)
}

fn check_lengths(a: &[usize], b: &[usize], min: usize) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("label lengths differ: {} vs {}", a.len(), b.len())));
    }
    if a.len() < min {
        return Err(Error::Range(format!("need at least {min} labels, got {}", a.len())));
    }
    Ok(())
}

struct Contingency {
    cells: BTreeMap<(usize, usize), usize>,
    rows: BTreeMap<usize, usize>,
    cols: BTreeMap<usize, usize>,
}

fn contingency(a: &[usize], b: &[usize]) -> Contingency {
    let mut t = Contingency {
        cells: BTreeMap::new(),
        rows: BTreeMap::new(),
        cols: BTreeMap::new(),
    };
    for (&x, &y) in a.iter().zip(b) {
        *t.cells.entry((x, y)).or_insert(0) += 1;
        *t.rows.entry(x).or_insert(0) += 1;
        *t.cols.entry(y).or_insert(0) += 1;
    }
    t
}

fn entropy(counts: &BTreeMap<usize, usize>, n: f64) -> f64 {
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information over the arithmetic mean of the two entropies (natural
/// log). Two single-cluster labelings score 1.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    check_lengths(a, b, 1)?;
    let n = a.len() as f64;
    let t = contingency(a, b);
    let (ha, hb) = (entropy(&t.rows, n), entropy(&t.cols, n));
    if ha + hb == 0.0 {
        return Ok(1.0);
    }
    let mi: f64 = t
        .cells
        .iter()
        .map(|(&(x, y), &c)| {
            let pxy = c as f64 / n;
            let px = t.rows[&x] as f64 / n;
            let py = t.cols[&y] as f64 / n;
            pxy * (pxy / (px * py)).ln()
        })
        .sum();
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}

/// Fraction of pairs on which the two labelings agree (same-same or
/// different-different).
pub fn rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    check_lengths(a, b, 2)?;
    let pairs = |c: usize| (c * c.saturating_sub(1) / 2) as u128;
    let n = a.len();
    let t = contingency(a, b);
    let total = pairs(n);
    let both: u128 = t.cells.values().map(|&c| pairs(c)).sum();
    let same_a: u128 = t.rows.values().map(|&c| pairs(c)).sum();
    let same_b: u128 = t.cols.values().map(|&c| pairs(c)).sum();
    // pairs split in both labelings
    let split = total + both - same_a - same_b;
    Ok((both + split) as f64 / total as f64)
}

/// Distance matrix, median bandwidth, kernel and spectral clustering on the
/// raw event data, scored against the dataset labels.
pub fn dis_sc_baseline(dataset: &Dataset, k: usize, mode: SubsetMode, seed: u64) -> Result<ClusteringReport> {
    dis_sc_baseline_with(dataset, k, mode, DistancePower::default(), seed)
}

pub fn dis_sc_baseline_with(
    dataset: &Dataset,
    k: usize,
    mode: SubsetMode,
    power: DistancePower,
    seed: u64,
) -> Result<ClusteringReport> {
    let truth = dataset
        .labels()
        .ok_or_else(|| Error::InvalidDataset("clustering baseline needs a fully labeled dataset".into()))?;
    let d = distance_matrix::<f64>(dataset.sequences(), mode, dataset.num_types(), dataset.horizon())?;
    let kernel = kernel_from_distances(&d, median_bandwidth(&d), power)?;
    let predicted = spectral_cluster(&kernel, k, seed)?;
    ClusteringReport::score(predicted, &truth, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block_kernel(sizes: &[usize], inside: f64, across: f64) -> (KernelMatrix<f64>, Vec<usize>) {
        let truth: Vec<usize> = sizes.iter().enumerate().flat_map(|(b, &s)| std::iter::repeat(b).take(s)).collect();
        let n = truth.len();
        let m = Mat::from_fn(n, n, |i, j| {
            if i == j {
                1.0
            } else if truth[i] == truth[j] {
                inside
            } else {
                across
            }
        });
        (KernelMatrix::new(m).unwrap(), truth)
    }

    #[test]
    fn recovers_blocks() {
        let (k, truth) = block_kernel(&[10, 10], 0.9, 0.1);
        let labels = spectral_cluster(&k, 2, 7).unwrap();
        assert_eq!(nmi(&labels, &truth).unwrap(), 1.0);
        assert_eq!(labels, truth);
        let (k3, truth3) = block_kernel(&[6, 8, 5], 0.8, 0.05);
        let l3 = spectral_cluster(&k3, 3, 1).unwrap();
        assert!((nmi(&l3, &truth3).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_ones_kernel_is_accepted() {
        let k = KernelMatrix::new(Mat::filled(6, 6, 1.0)).unwrap();
        let labels = spectral_cluster(&k, 2, 3).unwrap();
        assert_eq!(labels.len(), 6);
        assert_eq!(rand_index(&labels, &labels).unwrap(), 1.0);
    }

    #[test]
    fn permutation_permutes_labels() {
        let (k, _) = block_kernel(&[7, 9], 0.85, 0.2);
        let perm: Vec<usize> = vec![3, 15, 0, 8, 12, 1, 6, 10, 2, 14, 5, 9, 4, 13, 7, 11];
        let base = spectral_cluster(&k, 2, 5).unwrap();
        let moved = spectral_cluster(&k.permuted(&perm), 2, 5).unwrap();
        let expected: Vec<usize> = perm.iter().map(|&p| base[p]).collect();
        assert_eq!(nmi(&moved, &expected).unwrap(), 1.0);
    }

    #[test]
    fn k_out_of_range() {
        let (k, _) = block_kernel(&[2, 2], 0.9, 0.1);
        assert!(spectral_cluster(&k, 5, 0).is_err());
        assert!(spectral_cluster(&k, 1, 0).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let (k, _) = block_kernel(&[5, 5, 5], 0.5, 0.4);
        assert_eq!(spectral_cluster(&k, 3, 11).unwrap(), spectral_cluster(&k, 3, 11).unwrap());
    }

    #[test]
    fn nmi_examples() {
        assert_eq!(nmi(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap().abs() < 1e-15);
        assert_eq!(nmi(&[0, 0, 0], &[5, 5, 5]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 0, 0, 0], &[0, 1, 0, 1]).unwrap(), 0.0);
        assert!(nmi(&[0, 1], &[0]).is_err());

        // contingency by hand: a=[0,0,1,1], b=[0,0,0,1]
        // cells (0,0)=2, (1,0)=1, (1,1)=1; marginals a:(2,2), b:(3,1)
        let n = 4.0f64;
        let mi = 0.5 * (0.5f64 / (0.5 * 0.75)).ln() + 0.25 * (0.25f64 / (0.5 * 0.75)).ln() + 0.25 * (0.25f64 / (0.5 * 0.25)).ln();
        let ha = 2.0 * -(0.5f64 * 0.5f64.ln());
        let hb = -(0.75f64 * 0.75f64.ln()) - 0.25 * 0.25f64.ln();
        let expected = 2.0 * mi / (ha + hb);
        let _ = n;
        assert!((nmi(&[0, 0, 1, 1], &[0, 0, 0, 1]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn rand_index_examples() {
        assert_eq!(rand_index(&[0, 1, 2, 0], &[0, 1, 2, 0]).unwrap(), 1.0);
        assert_eq!(rand_index(&[0, 1], &[1, 0]).unwrap(), 1.0);
        assert!((rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap() - 2.0 / 6.0).abs() < 1e-15);
        assert!(rand_index(&[0], &[0]).is_err());
        assert!(rand_index(&[0, 1], &[0, 1, 1]).is_err());
    }

    #[test]
    fn rand_index_matches_pair_enumeration() {
        let a = [0, 1, 1, 2, 0, 2, 2, 1, 0];
        let b = [1, 1, 0, 0, 1, 2, 0, 0, 1];
        let mut agree = 0;
        let mut total = 0;
        for i in 0..a.len() {
            for j in (i + 1)..a.len() {
                total += 1;
                if (a[i] == a[j]) == (b[i] == b[j]) {
                    agree += 1;
                }
            }
        }
        assert!((rand_index(&a, &b).unwrap() - agree as f64 / total as f64).abs() < 1e-15);
    }

    #[test]
    fn canonical_labels_renumber() {
        assert_eq!(canonical_labels(&[4, 4, 1, 7, 1]), vec![0, 0, 1, 2, 1]);
    }
}
